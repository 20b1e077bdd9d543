//! Checkpoint files: a plain-text header followed by raw tensors.
//!
//! ```text
//! polyoie-checkpoint v1
//! key=value lines (encoder config, tag scheme, rng state, pool config)
//! vocab <count>
//! one token per line
//! params <count>
//! <name> <group> <dim>x<dim>...      in name order
//! end
//! <little-endian f64 payload, tensors in the same order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::molora::PoolConfig;
use crate::params::Group;
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

const MAGIC: &str = "polyoie-checkpoint";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let e = &model.config.encoder;
    let mut h = String::new();
    let mut kv = |k: &str, v: String| {
        h.push_str(k);
        h.push('=');
        h.push_str(&v);
        h.push('\n');
    };
    kv("encoder.vocab_size", e.vocab_size.to_string());
    kv("encoder.hidden_size", e.hidden_size.to_string());
    kv("encoder.num_layers", e.num_layers.to_string());
    kv("encoder.num_heads", e.num_heads.to_string());
    kv("encoder.ff_size", e.ff_size.to_string());
    kv("encoder.max_len", e.max_len.to_string());
    kv("model.arg_blocks", model.config.arg_blocks.to_string());
    kv("tags.predicate", model.scheme.predicate.join(" "));
    kv("tags.argument", model.scheme.argument.join(" "));
    kv("rng.seed", hex::encode(model.rng.get_seed()));
    kv("rng.word_pos", model.rng.get_word_pos().to_string());
    kv("provenance", model.provenance.join(" "));
    match &model.pool {
        None => kv("pool", "none".into()),
        Some(p) => {
            kv("pool", "attached".into());
            kv("pool.experts", p.config.experts.to_string());
            kv("pool.rank", p.config.rank.to_string());
            kv("pool.top_k", p.config.top_k.to_string());
            kv("pool.alpha", p.config.alpha.to_string());
            kv("pool.embedding_site", p.config.embedding_site.to_string());
        }
    }
    let mut out = format!("{MAGIC} v{VERSION}\n");
    out.push_str(&h);
    out.push_str(&format!("vocab {}\n", model.vocab.len()));
    for t in model.vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    out.push_str(&format!("params {}\n", model.params.len()));
    for p in model.params.iter_sorted() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        out.push_str(&format!("{} {} {}\n", p.name, p.group, dims.join("x")));
    }
    out.push_str("end\n");
    let mut bytes = out.into_bytes();
    for p in model.params.iter_sorted() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct Entry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

struct Parsed<'a> {
    header: BTreeMap<String, String>,
    vocab: Vec<String>,
    entries: Vec<Entry>,
    payload: &'a [u8],
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Truncated("header ends early".into()))?;
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| Error::data("checkpoint header", "not valid UTF-8"))
    }
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    let mut lines = Lines { bytes, pos: 0 };
    let first = lines.next()?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|r| r.strip_prefix(" v"))
        .ok_or_else(|| Error::data("checkpoint header", "not a checkpoint file"))?;
    if version != VERSION.to_string() {
        return Err(Error::Version {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let mut header = BTreeMap::new();
    let vocab_count = loop {
        let line = lines.next()?;
        if let Some(n) = line.strip_prefix("vocab ") {
            break parse_num::<usize>("vocab", n)?;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data("checkpoint header", format!("bad line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    };
    let vocab = (0..vocab_count).map(|_| lines.next().map(str::to_string)).collect::<Result<Vec<_>>>()?;
    let count_line = lines.next()?;
    let count = count_line
        .strip_prefix("params ")
        .ok_or_else(|| Error::data("checkpoint header", "missing params line"))
        .and_then(|n| parse_num::<usize>("params", n))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next()?;
        let mut parts = line.split(' ');
        let (Some(name), Some(group), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::data("checkpoint header", format!("bad parameter line {line:?}")));
        };
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split('x').map(|d| parse_num::<usize>("dimension", d)).collect::<Result<_>>()?
        };
        entries.push(Entry {
            name: name.to_string(),
            group: group.parse()?,
            shape,
        });
    }
    if lines.next()? != "end" {
        return Err(Error::data("checkpoint header", "missing end marker"));
    }
    let payload = &bytes[lines.pos..];
    let expected: usize = entries.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
    if payload.len() < expected {
        return Err(Error::Truncated(format!("payload has {} of {expected} bytes", payload.len())));
    }
    if payload.len() > expected {
        return Err(Error::data("checkpoint payload", "trailing bytes"));
    }
    Ok(Parsed {
        header,
        vocab,
        entries,
        payload,
    })
}

fn parse_num<T: std::str::FromStr>(what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::data("checkpoint header", format!("bad {what} value {s:?}")))
}

fn field<'h>(header: &'h BTreeMap<String, String>, key: &str) -> Result<&'h str> {
    header
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::data("checkpoint header", format!("missing {key}")))
}

fn num<T: std::str::FromStr>(header: &BTreeMap<String, String>, key: &str) -> Result<T> {
    parse_num(key, field(header, key)?)
}

/// Raw payload bytes of every tensor, keyed by parameter name.
pub fn tensor_bytes(bytes: &[u8]) -> Result<BTreeMap<String, (Group, Vec<u8>)>> {
    let parsed = parse(bytes)?;
    let mut offset = 0;
    let mut out = BTreeMap::new();
    for e in parsed.entries {
        let len = e.shape.iter().product::<usize>() * 8;
        out.insert(e.name, (e.group, parsed.payload[offset..offset + len].to_vec()));
        offset += len;
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let parsed = parse(bytes)?;
    let h = &parsed.header;
    let encoder = EncoderConfig {
        vocab_size: num(h, "encoder.vocab_size")?,
        hidden_size: num(h, "encoder.hidden_size")?,
        num_layers: num(h, "encoder.num_layers")?,
        num_heads: num(h, "encoder.num_heads")?,
        ff_size: num(h, "encoder.ff_size")?,
        max_len: num(h, "encoder.max_len")?,
    };
    let config = ModelConfig {
        encoder,
        arg_blocks: num(h, "model.arg_blocks")?,
    };
    let vocab = Vocab::from_tokens(parsed.vocab)?;
    let mut model = Model::new(config, vocab, 0)?;
    let split = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    if split(field(h, "tags.predicate")?) != model.scheme.predicate
        || split(field(h, "tags.argument")?) != model.scheme.argument
    {
        return Err(Error::data("checkpoint header", "tag scheme differs from this build"));
    }
    match field(h, "pool")? {
        "none" => {}
        "attached" => model.attach(PoolConfig {
            experts: num(h, "pool.experts")?,
            rank: num(h, "pool.rank")?,
            top_k: num(h, "pool.top_k")?,
            alpha: num(h, "pool.alpha")?,
            embedding_site: num(h, "pool.embedding_site")?,
        })?,
        other => return Err(Error::data("checkpoint header", format!("bad pool value {other:?}"))),
    }
    if parsed.entries.len() != model.params.len() {
        return Err(Error::data(
            "checkpoint header",
            format!("{} tensors stored, model has {}", parsed.entries.len(), model.params.len()),
        ));
    }
    let mut offset = 0;
    for e in &parsed.entries {
        let id = model
            .params
            .id(&e.name)
            .ok_or_else(|| Error::data("checkpoint header", format!("unknown parameter {}", e.name)))?;
        let p = model.params.get_mut(id);
        if p.group != e.group || p.value.shape() != e.shape.as_slice() {
            return Err(Error::data("checkpoint header", format!("parameter {} has wrong group or shape", e.name)));
        }
        let n = p.value.len();
        let data: Vec<f64> = parsed.payload[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += 8 * n;
        p.value = Tensor::new(e.shape.clone(), data)?;
    }
    let seed_hex = field(h, "rng.seed")?;
    let seed: [u8; 32] = hex::decode(seed_hex)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::data("checkpoint header", "bad rng seed"))?;
    model.rng = rng::restore(seed, num(h, "rng.word_pos")?);
    let prov = field(h, "provenance")?;
    model.provenance = if prov.is_empty() { Vec::new() } else { split(prov) };
    Ok(model)
}
