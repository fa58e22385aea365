//! Volumes, label maps and their on-disk format.
//!
//! Each grid is stored as two files: `<stem>.raw` holding little-endian
//! scalars in `z, y, x` order, and `<stem>.raw.hdr`, a text header:
//!
//! ```text
//! MSTPVOL1
//! extents 40 40 40
//! spacing_mm 1.5 1.5 1.5
//! dtype f32
//! ```
//!
//! Label headers carry one extra `legend` line, e.g.
//! `legend 0=background 1=organ:1 11=tumor:1`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &str = "MSTPVOL1";

pub type Extents = [usize; 3];

pub fn voxel_count(e: Extents) -> usize {
    e[0] * e[1] * e[2]
}

#[inline]
pub fn index(e: Extents, z: usize, y: usize, x: usize) -> usize {
    (z * e[1] + y) * e[2] + x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: Extents,
    pub spacing_mm: [f64; 3],
    pub grid: Vec<f32>,
}

impl Volume {
    pub fn new(extents: Extents, spacing_mm: [f64; 3], grid: Vec<f32>) -> Result<Self> {
        if grid.len() != voxel_count(extents) {
            return Err(Error::invalid_shape("volume", &extents, format!("grid holds {} voxels", grid.len())));
        }
        if spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Contract(format!("spacing must be positive, got {spacing_mm:?}")));
        }
        Ok(Self { extents, spacing_mm, grid })
    }

    pub fn filled(extents: Extents, spacing_mm: [f64; 3], value: f32) -> Self {
        Self {
            extents,
            spacing_mm,
            grid: vec![value; voxel_count(extents)],
        }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.grid[index(self.extents, z, y, x)]
    }
}

/// Meaning of a label value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Background,
    Organ(u8),
    Tumor(u8),
}

/// Fixed label encoding: 0 is background, organ `o` is `o`, tumor class `c`
/// is `TUMOR_LABEL_BASE + c`.
pub const TUMOR_LABEL_BASE: u8 = 10;

pub fn organ_label(organ_id: u8) -> u8 {
    organ_id
}

pub fn tumor_label(class_id: u8) -> u8 {
    TUMOR_LABEL_BASE + class_id
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Legend {
    entries: Vec<(u8, LabelKind)>,
}

impl Legend {
    pub fn new(organs: &[u8], classes: &[u8]) -> Self {
        let mut entries = vec![(0, LabelKind::Background)];
        entries.extend(organs.iter().map(|o| (organ_label(*o), LabelKind::Organ(*o))));
        entries.extend(classes.iter().map(|c| (tumor_label(*c), LabelKind::Tumor(*c))));
        Self { entries }
    }

    pub fn kind(&self, label: u8) -> Option<LabelKind> {
        self.entries.iter().find(|(l, _)| *l == label).map(|(_, k)| *k)
    }

    pub fn entries(&self) -> &[(u8, LabelKind)] {
        &self.entries
    }

    fn to_header(&self) -> String {
        self.entries
            .iter()
            .map(|(l, k)| match k {
                LabelKind::Background => format!("{l}=background"),
                LabelKind::Organ(o) => format!("{l}=organ:{o}"),
                LabelKind::Tumor(c) => format!("{l}=tumor:{c}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn from_header(fields: &[&str]) -> Option<Self> {
        let mut entries = Vec::new();
        for f in fields {
            let (l, k) = f.split_once('=')?;
            let l: u8 = l.parse().ok()?;
            let kind = match k.split_once(':') {
                None if k == "background" => LabelKind::Background,
                Some(("organ", o)) => LabelKind::Organ(o.parse().ok()?),
                Some(("tumor", c)) => LabelKind::Tumor(c.parse().ok()?),
                _ => return None,
            };
            entries.push((l, kind));
        }
        Some(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub extents: Extents,
    pub spacing_mm: [f64; 3],
    pub grid: Vec<u8>,
    pub legend: Legend,
}

impl LabelMap {
    pub fn new(extents: Extents, spacing_mm: [f64; 3], grid: Vec<u8>, legend: Legend) -> Result<Self> {
        if grid.len() != voxel_count(extents) {
            return Err(Error::invalid_shape("label map", &extents, format!("grid holds {} voxels", grid.len())));
        }
        Ok(Self { extents, spacing_mm, grid, legend })
    }

    pub fn kind_at(&self, i: usize) -> Option<LabelKind> {
        self.legend.kind(self.grid[i])
    }

    /// Segmentation target per voxel: tumor class id, or 0 for everything else.
    pub fn segmentation_target(&self) -> Result<Vec<u8>> {
        let mut lut = [None::<u8>; 256];
        for (l, k) in self.legend.entries() {
            lut[*l as usize] = Some(match k {
                LabelKind::Tumor(c) => *c,
                _ => 0,
            });
        }
        self.grid
            .iter()
            .map(|l| lut[*l as usize].ok_or_else(|| Error::Registry(format!("label {l} missing from legend"))))
            .collect()
    }

    /// Tumor class present in the map (the largest by voxel count), or 0.
    pub fn tumor_class(&self) -> Result<u8> {
        let target = self.segmentation_target()?;
        let mut counts = [0usize; 256];
        for t in target {
            counts[t as usize] += 1;
        }
        Ok((1..256)
            .filter(|c| counts[*c] > 0)
            .max_by_key(|c| (counts[*c], std::cmp::Reverse(*c)))
            .map_or(0, |c| c as u8))
    }

    /// Organ ids per voxel (0 outside organs); tumor voxels are reported as
    /// their host organ via `host_of`.
    pub fn organ_mask(&self, host_of: impl Fn(u8) -> Option<u8>) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.grid.len());
        for l in &self.grid {
            let organ = match self.legend.kind(*l) {
                Some(LabelKind::Background) => 0,
                Some(LabelKind::Organ(o)) => o,
                Some(LabelKind::Tumor(c)) => {
                    host_of(c).ok_or_else(|| Error::Registry(format!("tumor class {c} has no host organ")))?
                }
                None => return Err(Error::Registry(format!("label {l} missing from legend"))),
            };
            out.push(organ);
        }
        Ok(out)
    }
}

fn header(extents: Extents, spacing: [f64; 3], dtype: &str, legend: Option<&Legend>) -> String {
    let mut h = String::new();
    let _ = writeln!(h, "{VOLUME_MAGIC}");
    let _ = writeln!(h, "extents {} {} {}", extents[0], extents[1], extents[2]);
    let _ = writeln!(h, "spacing_mm {} {} {}", spacing[0], spacing[1], spacing[2]);
    let _ = writeln!(h, "dtype {dtype}");
    if let Some(l) = legend {
        let _ = writeln!(h, "legend {}", l.to_header());
    }
    h
}

struct Header {
    extents: Extents,
    spacing: [f64; 3],
    dtype: String,
    legend: Option<Legend>,
}

pub fn header_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

fn read_header(raw: &Path) -> Result<Header> {
    let path = header_path(raw);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(VOLUME_MAGIC) {
        return Err(Error::format(&path, format!("missing {VOLUME_MAGIC} magic")));
    }
    let (mut extents, mut spacing, mut dtype, mut legend) = (None, None, None, None);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        let bad = || Error::format(&path, format!("malformed line {line:?}"));
        match key {
            "extents" => {
                let v: Vec<usize> = rest.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                extents = Some(<[usize; 3]>::try_from(v).map_err(|_| bad())?);
            }
            "spacing_mm" => {
                let v: Vec<f64> = rest.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                spacing = Some(<[f64; 3]>::try_from(v).map_err(|_| bad())?);
            }
            "dtype" => dtype = rest.first().map(|s| s.to_string()),
            "legend" => legend = Some(Legend::from_header(&rest).ok_or_else(bad)?),
            _ => return Err(Error::format(&path, format!("unknown header field {key:?}"))),
        }
    }
    Ok(Header {
        extents: extents.ok_or_else(|| Error::format(&path, "missing extents"))?,
        spacing: spacing.ok_or_else(|| Error::format(&path, "missing spacing_mm"))?,
        dtype: dtype.ok_or_else(|| Error::format(&path, "missing dtype"))?,
        legend,
    })
}

pub fn write_volume(raw: &Path, v: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.grid.len() * 4);
    for x in &v.grid {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
    let hp = header_path(raw);
    fs::write(&hp, header(v.extents, v.spacing_mm, "f32", None)).map_err(|e| Error::io(&hp, e))
}

pub fn read_volume(raw: &Path) -> Result<Volume> {
    let h = read_header(raw)?;
    if h.dtype != "f32" {
        return Err(Error::format(raw, format!("expected dtype f32, found {}", h.dtype)));
    }
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    if bytes.len() != voxel_count(h.extents) * 4 {
        return Err(Error::format(raw, format!("expected {} bytes, found {}", voxel_count(h.extents) * 4, bytes.len())));
    }
    let grid = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(h.extents, h.spacing, grid)
}

pub fn write_labels(raw: &Path, l: &LabelMap) -> Result<()> {
    fs::write(raw, &l.grid).map_err(|e| Error::io(raw, e))?;
    let hp = header_path(raw);
    fs::write(&hp, header(l.extents, l.spacing_mm, "u8", Some(&l.legend))).map_err(|e| Error::io(&hp, e))
}

pub fn read_labels(raw: &Path) -> Result<LabelMap> {
    let h = read_header(raw)?;
    if h.dtype != "u8" {
        return Err(Error::format(raw, format!("expected dtype u8, found {}", h.dtype)));
    }
    let grid = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    if grid.len() != voxel_count(h.extents) {
        return Err(Error::format(raw, format!("expected {} bytes, found {}", voxel_count(h.extents), grid.len())));
    }
    let legend = h.legend.ok_or_else(|| Error::format(raw, "label header lacks a legend"))?;
    LabelMap::new(h.extents, h.spacing, grid, legend)
}
