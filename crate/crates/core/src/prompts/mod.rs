//! Knowledge-driven prompts: attribute records rendered into text, a
//! hash-token text encoder and a convolutional organ-mask encoder.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{init_rng, init_uniform, Ctx, ParamId, ParamStore};
use crate::rng::hash_str;
use crate::tensor::{Float, Tensor, Var};

pub const DEFAULT_PROMPTS: &str = include_str!("../../assets/prompts.cfg");
pub const EMBEDDING_MAGIC: &str = "MSTPEMB1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub class_id: u8,
    pub c: String,
    pub o: String,
    pub s: String,
    pub e: String,
    pub m: String,
}

impl PromptSpec {
    pub fn new(class_id: u8, c: &str, o: &str, s: &str, e: &str, m: &str) -> Result<Self> {
        let spec = Self {
            class_id,
            c: c.trim().into(),
            o: o.trim().into(),
            s: s.trim().into(),
            e: e.trim().into(),
            m: m.trim().into(),
        };
        if [&spec.c, &spec.o, &spec.s, &spec.e, &spec.m].iter().any(|f| f.is_empty()) {
            return Err(Error::Registry(format!("class {class_id}: prompt attributes must be non-empty")));
        }
        Ok(spec)
    }
}

pub fn render_prompt(spec: &PromptSpec) -> String {
    format!(
        "This is a {} in the {}, appearing as a {} mass with {} borders on {}.",
        spec.c, spec.o, spec.s, spec.e, spec.m
    )
}

/// One [`PromptSpec`] per tumor class, parsed from `class_id|C|O|S|E|M` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRegistry {
    pub specs: Vec<PromptSpec>,
}

impl PromptRegistry {
    pub fn parse(text: &str) -> Result<Self> {
        let mut specs: Vec<PromptSpec> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('|').collect();
            if f.len() != 6 {
                return Err(Error::Registry(format!("prompts line {}: expected 6 fields, found {}", n + 1, f.len())));
            }
            let id: u8 = f[0]
                .trim()
                .parse()
                .map_err(|_| Error::Registry(format!("prompts line {}: bad class id {:?}", n + 1, f[0])))?;
            if id == 0 || specs.iter().any(|s| s.class_id == id) {
                return Err(Error::Registry(format!("prompts line {}: class id {id} is zero or duplicated", n + 1)));
            }
            specs.push(PromptSpec::new(id, f[1], f[2], f[3], f[4], f[5])?);
        }
        if specs.is_empty() {
            return Err(Error::Registry("prompt registry is empty".into()));
        }
        Ok(Self { specs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_registry() -> Self {
        Self::parse(DEFAULT_PROMPTS).expect("shipped registry parses")
    }

    pub fn get(&self, class_id: u8) -> Result<&PromptSpec> {
        self.specs
            .iter()
            .find(|s| s.class_id == class_id)
            .ok_or_else(|| Error::Registry(format!("no prompt for class {class_id}")))
    }

    /// Checks that the registry covers exactly `class_ids`.
    pub fn check_classes(&self, class_ids: &[u8]) -> Result<()> {
        let mut mine: Vec<u8> = self.specs.iter().map(|s| s.class_id).collect();
        let mut theirs = class_ids.to_vec();
        mine.sort_unstable();
        theirs.sort_unstable();
        if mine != theirs {
            return Err(Error::Config(format!("prompt registry classes {mine:?} do not match dataset classes {theirs:?}")));
        }
        Ok(())
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Embedding-table rows for `text`.
pub fn token_ids(text: &str, vocab: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = tokenize(text).iter().map(|t| (hash_str(t) % vocab as u64) as usize).collect();
    if ids.is_empty() {
        return Err(Error::Contract("text has no tokens".into()));
    }
    Ok(ids)
}

/// Mean of token rows of `table: [V, d]`, before layernorm.
pub fn bag_of_tokens(text: &str, table: &Tensor<f32>) -> Result<Vec<f64>> {
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let ids = token_ids(text, v)?;
    let mut out = vec![0.0; d];
    for i in &ids {
        for (o, x) in out.iter_mut().zip(&table.data()[i * d..(i + 1) * d]) {
            *o += *x as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= ids.len() as f64);
    Ok(out)
}

/// Layernormed bag-of-tokens embedding, outside any graph.
pub fn encode_text(text: &str, table: &Tensor<f32>) -> Result<Vec<f32>> {
    let x = bag_of_tokens(text, table)?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    Ok(x.iter().map(|v| ((v - mean) * inv) as f32).collect())
}

/// Hash-token text encoder with a learnable `[vocab, d_p]` table.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub table: ParamId,
    pub vocab: usize,
    pub d_p: usize,
}

impl TextEncoder {
    pub fn build(store: &mut ParamStore, seed: u64, vocab: usize, d_p: usize) -> Result<Self> {
        let name = "prompts.text.table";
        let table = store.add(name, "prompts.text", init_uniform(&[vocab, d_p], 1.0, &mut init_rng(seed, name)))?;
        Ok(Self { table, vocab, d_p })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, text: &str) -> Result<Var> {
        let ids = token_ids(text, self.vocab)?;
        let table = ctx.p(self.table);
        let rows = ctx.g.gather_rows(table, &ids)?;
        let mean = ctx.g.mean_axis(rows, 0)?;
        ctx.g.layernorm(mean)
    }
}

/// Organ-mask encoder: one-hot organ channels, two stride-2 conv blocks,
/// global average pooling and a linear map to `d_p`.
#[derive(Debug, Clone)]
pub struct AnatomyEncoder {
    pub organs: Vec<u8>,
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub linear: (ParamId, ParamId),
}

fn conv_params(store: &mut ParamStore, seed: u64, prefix: &str, group: &str, cin: usize, cout: usize, k: usize) -> Result<(ParamId, ParamId)> {
    let fan_in = (cin * k * k * k) as f64;
    let wname = format!("{prefix}.w");
    let w = store.add(&wname, group, init_uniform(&[cout, cin, k, k, k], (6.0 / fan_in).sqrt(), &mut init_rng(seed, &wname)))?;
    let b = store.add(&format!("{prefix}.b"), group, Tensor::zeros(&[cout]))?;
    Ok((w, b))
}

pub(crate) fn linear_params(store: &mut ParamStore, seed: u64, prefix: &str, group: &str, din: usize, dout: usize) -> Result<(ParamId, ParamId)> {
    let wname = format!("{prefix}.w");
    let w = store.add(&wname, group, init_uniform(&[din, dout], (3.0 / din as f64).sqrt(), &mut init_rng(seed, &wname)))?;
    let b = store.add(&format!("{prefix}.b"), group, Tensor::zeros(&[dout]))?;
    Ok((w, b))
}

impl AnatomyEncoder {
    pub const CHANNELS: [usize; 2] = [4, 8];

    pub fn build(store: &mut ParamStore, seed: u64, organs: &[u8], d_p: usize) -> Result<Self> {
        let g = "prompts.anatomy";
        let [c1, c2] = Self::CHANNELS;
        Ok(Self {
            organs: organs.to_vec(),
            conv1: conv_params(store, seed, "prompts.anatomy.conv1", g, organs.len(), c1, 3)?,
            conv2: conv_params(store, seed, "prompts.anatomy.conv2", g, c1, c2, 3)?,
            linear: linear_params(store, seed, "prompts.anatomy.linear", g, c2, d_p)?,
        })
    }

    /// One channel per registered organ; background is all zeros.
    pub fn one_hot<T: Float>(&self, mask: &[u8], extents: [usize; 3]) -> Result<Tensor<T>> {
        let n = extents.iter().product::<usize>();
        if mask.len() != n {
            return Err(Error::shape("encode_anatomy", &[mask.len()], &extents));
        }
        let mut data = vec![T::zero(); self.organs.len() * n];
        for (i, l) in mask.iter().enumerate() {
            if *l == 0 {
                continue;
            }
            let ch = self
                .organs
                .iter()
                .position(|o| o == l)
                .ok_or_else(|| Error::Registry(format!("unknown organ label {l}")))?;
            data[ch * n + i] = T::one();
        }
        Tensor::new(&[self.organs.len(), extents[0], extents[1], extents[2]], data)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, mask: &[u8], extents: [usize; 3]) -> Result<Var> {
        let x = ctx.g.constant(self.one_hot(mask, extents)?);
        let (w1, b1) = (ctx.p(self.conv1.0), ctx.p(self.conv1.1));
        let h = ctx.g.conv3d(x, w1, Some(b1), 2, 1)?;
        let h = ctx.g.relu(h);
        let (w2, b2) = (ctx.p(self.conv2.0), ctx.p(self.conv2.1));
        let h = ctx.g.conv3d(h, w2, Some(b2), 2, 1)?;
        let h = ctx.g.relu(h);
        let c = ctx.g.shape(h)[0];
        let flat = ctx.g.reshape(h, &[c, ctx.g.value(h).numel() / c])?;
        let pooled = ctx.g.mean_axis(flat, 1)?;
        let row = ctx.g.reshape(pooled, &[1, c])?;
        let (w, b) = (ctx.p(self.linear.0), ctx.p(self.linear.1));
        let y = ctx.g.matmul(row, w)?;
        let y = ctx.g.add_bias(y, b)?;
        let d = ctx.g.shape(y)[1];
        ctx.g.reshape(y, &[d])
    }
}

/// Precomputed per-class text embeddings that replace the text encoder.
///
/// Stored like volumes: `<stem>.raw` holds `classes × dim` little-endian
/// f32 values, `<stem>.raw.hdr` holds `MSTPEMB1`, `dim`, `classes` and
/// `dtype f32` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddings {
    pub dim: usize,
    pub vectors: Vec<(u8, Vec<f32>)>,
}

impl ExternalEmbeddings {
    pub fn get(&self, class_id: u8) -> Result<&[f32]> {
        self.vectors
            .iter()
            .find(|(c, _)| *c == class_id)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Registry(format!("no external embedding for class {class_id}")))
    }

    pub fn save(&self, raw: &Path) -> Result<()> {
        let mut hdr = format!("{EMBEDDING_MAGIC}\ndim {}\nclasses", self.dim);
        for (c, _) in &self.vectors {
            let _ = write!(hdr, " {c}");
        }
        hdr.push_str("\ndtype f32\n");
        let mut bytes = Vec::new();
        for (_, v) in &self.vectors {
            v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes()));
        }
        fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
        let hp = crate::synth::volume::header_path(raw);
        fs::write(&hp, hdr).map_err(|e| Error::io(&hp, e))
    }

    pub fn load(raw: &Path) -> Result<Self> {
        let hp = crate::synth::volume::header_path(raw);
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(EMBEDDING_MAGIC) {
            return Err(Error::format(&hp, format!("missing {EMBEDDING_MAGIC} magic")));
        }
        let (mut dim, mut classes) = (None, None);
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("dim") => dim = parts.next().and_then(|d| d.parse::<usize>().ok()),
                Some("classes") => classes = parts.map(|c| c.parse::<u8>().ok()).collect::<Option<Vec<_>>>(),
                Some("dtype") if parts.next() == Some("f32") => {}
                None => {}
                _ => return Err(Error::format(&hp, format!("malformed line {line:?}"))),
            }
        }
        let dim = dim.filter(|d| *d > 0).ok_or_else(|| Error::format(&hp, "missing dim"))?;
        let classes = classes.ok_or_else(|| Error::format(&hp, "missing classes"))?;
        let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
        if bytes.len() != classes.len() * dim * 4 {
            return Err(Error::format(raw, format!("expected {} bytes, found {}", classes.len() * dim * 4, bytes.len())));
        }
        let floats: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if floats.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(raw, "non-finite embedding entry"));
        }
        let vectors = classes.iter().zip(floats.chunks(dim)).map(|(c, v)| (*c, v.to_vec())).collect();
        Ok(Self { dim, vectors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_matches_reference_sentence() {
        let spec = PromptSpec::new(1, "liver tumor", "liver", "hypodense", "irregular", "CT").unwrap();
        assert_eq!(
            render_prompt(&spec),
            "This is a liver tumor in the liver, appearing as a hypodense mass with irregular borders on CT."
        );
    }

    #[test]
    fn registry_parsing() {
        let r = PromptRegistry::default_registry();
        assert_eq!(r.specs.len(), 3);
        assert!(r.check_classes(&[3, 1, 2]).is_ok());
        assert!(r.check_classes(&[1, 2]).is_err());
        assert!(PromptRegistry::parse("1|a|b|c|d").is_err());
        assert!(PromptRegistry::parse("1|a|b| |d|e").is_err());
        assert!(PromptRegistry::parse("1|a|b|c|d|e\n1|a|b|c|d|f").is_err());
        assert!(PromptRegistry::parse("# nothing\n").is_err());
    }

    #[test]
    fn tokenizer_ignores_case_spacing_and_punctuation() {
        assert_eq!(tokenize("This  is a CT."), vec!["this", "is", "a", "ct"]);
        assert!(token_ids("  ... ", 16).is_err());
    }

    #[test]
    fn zero_table_gives_zero_bag() {
        let t = Tensor::zeros(&[32, 8]);
        assert!(bag_of_tokens("liver tumor", &t).unwrap().iter().all(|v| *v == 0.0));
        assert!(encode_text("liver tumor", &t).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn external_embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = ExternalEmbeddings { dim: 3, vectors: vec![(1, vec![0.1, 0.2, 0.3]), (2, vec![-1.0, 0.0, 1.0])] };
        let p = dir.path().join("emb.raw");
        e.save(&p).unwrap();
        assert_eq!(ExternalEmbeddings::load(&p).unwrap(), e);
        assert!(e.get(3).is_err());
        fs::write(&p, [0u8; 5]).unwrap();
        assert!(ExternalEmbeddings::load(&p).is_err());
    }
}
