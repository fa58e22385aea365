//! Dataset directories: `manifest.txt` plus `cases/case_{i}_{img,lbl}.raw`.
//!
//! Manifest lines:
//!
//! ```text
//! seed 42
//! class 1 host=1 weight=0.5 count=101
//! case 0 split=train class=1 img=cases/case_0_img.raw lbl=cases/case_0_lbl.raw
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::generate::{generate_case, GeneratorConfig};
use super::recipe::{default_recipes, validate, TumorRecipe};
use super::volume::{header_path, read_labels, read_volume, write_labels, write_volume, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::rng::derive_key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub generator: GeneratorConfig,
    pub recipes: Vec<TumorRecipe>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_train: 200,
            n_val: 0,
            n_test: 50,
            generator: GeneratorConfig::default(),
            recipes: default_recipes(),
        }
    }
}

impl DatasetConfig {
    pub fn n_cases(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Cases are assigned to splits by index: train first, then val, then test.
    pub fn split_of(&self, i: usize) -> Split {
        if i < self.n_train {
            Split::Train
        } else if i < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseEntry {
    pub index: usize,
    pub split: Split,
    pub class_id: u8,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInfo {
    pub class_id: u8,
    pub host_organ: u8,
    pub weight: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub classes: Vec<ClassInfo>,
    pub cases: Vec<CaseEntry>,
}

/// Per-case generator seed.
pub fn case_seed(dataset_seed: u64, index: usize) -> u64 {
    derive_key(dataset_seed, index as u64)
}

pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    validate(&cfg.recipes, &cfg.generator.organs)?;
    let cases_dir = root.join("cases");
    fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;
    let mut entries = Vec::with_capacity(cfg.n_cases());
    for i in 0..cfg.n_cases() {
        let case = generate_case(case_seed(cfg.seed, i), &cfg.recipes, &cfg.generator)?;
        let image = PathBuf::from(format!("cases/case_{i}_img.raw"));
        let labels = PathBuf::from(format!("cases/case_{i}_lbl.raw"));
        write_volume(&root.join(&image), &case.volume)?;
        write_labels(&root.join(&labels), &case.labels)?;
        entries.push(CaseEntry { index: i, split: cfg.split_of(i), class_id: case.class_id, image, labels });
    }
    let classes = cfg
        .recipes
        .iter()
        .map(|r| ClassInfo {
            class_id: r.class_id,
            host_organ: r.host_organ,
            weight: r.frequency_weight,
            count: entries.iter().filter(|e| e.class_id == r.class_id).count(),
        })
        .collect();
    let manifest = DatasetManifest { root: root.to_path_buf(), seed: cfg.seed, classes, cases: entries };
    let path = root.join("manifest.txt");
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}", self.seed);
        for c in &self.classes {
            let _ = writeln!(s, "class {} host={} weight={} count={}", c.class_id, c.host_organ, c.weight, c.count);
        }
        for e in &self.cases {
            let _ = writeln!(
                s,
                "case {} split={} class={} img={} lbl={}",
                e.index,
                e.split.as_str(),
                e.class_id,
                e.image.display(),
                e.labels.display()
            );
        }
        s
    }

    /// Loads `root/manifest.txt` and checks that every referenced file exists.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut seed = None;
        let mut classes = Vec::new();
        let mut cases = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |why: &str| Error::format(&path, format!("line {}: {why}", n + 1));
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap();
            let id = parts.next().ok_or_else(|| bad("missing value"))?;
            let kv: Vec<(&str, &str)> = parts.map(|p| p.split_once('=').ok_or_else(|| bad("expected key=value"))).collect::<Result<_>>()?;
            let get = |k: &str| kv.iter().find(|(key, _)| *key == k).map(|(_, v)| *v).ok_or_else(|| bad(&format!("missing {k}")));
            match kind {
                "seed" => seed = Some(id.parse().map_err(|_| bad("bad seed"))?),
                "class" => classes.push(ClassInfo {
                    class_id: id.parse().map_err(|_| bad("bad class id"))?,
                    host_organ: get("host")?.parse().map_err(|_| bad("bad host"))?,
                    weight: get("weight")?.parse().map_err(|_| bad("bad weight"))?,
                    count: get("count")?.parse().map_err(|_| bad("bad count"))?,
                }),
                "case" => cases.push(CaseEntry {
                    index: id.parse().map_err(|_| bad("bad case index"))?,
                    split: Split::parse(get("split")?).ok_or_else(|| bad("bad split"))?,
                    class_id: get("class")?.parse().map_err(|_| bad("bad class"))?,
                    image: PathBuf::from(get("img")?),
                    labels: PathBuf::from(get("lbl")?),
                }),
                other => return Err(bad(&format!("unknown record {other:?}"))),
            }
        }
        let manifest = Self {
            root: root.to_path_buf(),
            seed: seed.ok_or_else(|| Error::format(&path, "missing seed"))?,
            classes,
            cases,
        };
        for e in &manifest.cases {
            for f in [&e.image, &e.labels] {
                let p = root.join(f);
                if !p.is_file() || !header_path(&p).is_file() {
                    return Err(Error::format(&path, format!("case {} references missing file {}", e.index, f.display())));
                }
            }
        }
        Ok(manifest)
    }

    pub fn split(&self, split: Split) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn load_case(&self, e: &CaseEntry) -> Result<(Volume, LabelMap)> {
        let v = read_volume(&self.root.join(&e.image))?;
        let l = read_labels(&self.root.join(&e.labels))?;
        if v.extents != l.extents {
            return Err(Error::shape("load_case", &v.extents, &l.extents));
        }
        Ok((v, l))
    }

    pub fn class_ids(&self) -> Vec<u8> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn host_of(&self, class_id: u8) -> Option<u8> {
        self.classes.iter().find(|c| c.class_id == class_id).map(|c| c.host_organ)
    }
}
