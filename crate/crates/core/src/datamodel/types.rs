use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label value excluded from losses, ranking, and metrics.
pub const IGNORE_ID: u8 = 255;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
    /// Flags underrepresented damage classes targeted by class-aware sampling.
    #[serde(default)]
    pub rare: bool,
}

/// Ordered class list with an ignore sentinel and the rare (damage) subset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ClassTable {
    pub classes: Vec<ClassDef>,
    #[serde(default = "default_ignore_id")]
    pub ignore_id: u8,
}

fn default_ignore_id() -> u8 {
    IGNORE_ID
}

impl ClassTable {
    pub fn new(classes: Vec<ClassDef>, ignore_id: u8) -> Result<Self> {
        let table = ClassTable { classes, ignore_id };
        table.validate()?;
        Ok(table)
    }

    /// The 11-class damage-assessment table: buildings annotated at four
    /// damage levels, roads at two passability levels, plus scene classes.
    pub fn default_11() -> Self {
        let names = [
            ("Background", false),
            ("Water", false),
            ("Building-No-Damage", false),
            ("Building-Minor-Damage", true),
            ("Building-Major-Damage", true),
            ("Building-Total-Destruction", true),
            ("Road-Clear", false),
            ("Road-Blocked", false),
            ("Tree", false),
            ("Pool", false),
            ("Vehicle", false),
        ];
        ClassTable {
            classes: names
                .iter()
                .enumerate()
                .map(|(i, (name, rare))| ClassDef {
                    id: i as u8,
                    name: (*name).to_string(),
                    rare: *rare,
                })
                .collect(),
            ignore_id: IGNORE_ID,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("class table has no classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Config(format!(
                    "class ids must be contiguous from 0: index {i} has id {}",
                    c.id
                )));
            }
            if c.id == self.ignore_id {
                return Err(Error::Config(format!(
                    "ignore_id {} collides with class '{}'",
                    self.ignore_id, c.name
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn rare_set(&self) -> BTreeSet<u8> {
        self.classes
            .iter()
            .filter(|c| c.rare)
            .map(|c| c.id)
            .collect()
    }

    pub fn is_valid_label(&self, id: u8) -> bool {
        id == self.ignore_id || (id as usize) < self.classes.len()
    }

    pub fn name(&self, id: u8) -> &str {
        &self.classes[id as usize].name
    }
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::default_11()
    }
}

/// Dense float raster in channel-planar layout, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `data[c * H * W + r * W + col]`
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[ch * self.height * self.width + r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.data[ch * self.height * self.width + r * self.width + c] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.height * self.width * self.channels {
            return Err(Error::Shape(format!(
                "image data length {} != {}x{}x{}",
                self.data.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "image contains non-finite value at flat index {pos}"
            )));
        }
        Ok(())
    }
}

/// Dense integer label raster; each value is a class id or the ignore sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    /// `data[r * W + c]`
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.width + c] = v;
    }

    /// Checks every value against the table; reports the first bad pixel.
    pub fn validate(&self, table: &ClassTable) -> Result<()> {
        if self.data.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "mask data length {} != {}x{}",
                self.data.len(),
                self.height,
                self.width
            )));
        }
        for (i, &v) in self.data.iter().enumerate() {
            if !table.is_valid_label(v) {
                return Err(Error::Validation(format!(
                    "invalid class id {} at pixel (row {}, col {})",
                    v,
                    i / self.width,
                    i % self.width
                )));
            }
        }
        Ok(())
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

/// Per-pixel class scores, class-contiguous layout: `data[(r * W + c) * C + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl LogitMap {
    pub fn zeros(height: usize, width: usize, num_classes: usize) -> Self {
        LogitMap {
            height,
            width,
            num_classes,
            data: vec![0.0; height * width * num_classes],
        }
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let base = (r * self.width + c) * self.num_classes;
        &self.data[base..base + self.num_classes]
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                let px = i / self.num_classes;
                return Err(Error::Validation(format!(
                    "non-finite logit at pixel (row {}, col {}), class {}",
                    px / self.width,
                    px % self.width,
                    i % self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel class distributions; each pixel's class vector sums to 1 ± 1e-5.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn zeros(height: usize, width: usize, num_classes: usize) -> Self {
        ProbabilityMap {
            height,
            width,
            num_classes,
            data: vec![0.0; height * width * num_classes],
        }
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let base = (r * self.width + c) * self.num_classes;
        &self.data[base..base + self.num_classes]
    }

    pub fn validate(&self) -> Result<()> {
        for px in 0..self.height * self.width {
            let base = px * self.num_classes;
            let s: f64 = self.data[base..base + self.num_classes].iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Validation(format!(
                    "probability row at pixel (row {}, col {}) sums to {s}, expected 1",
                    px / self.width,
                    px % self.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}', expected train|val|test"
            ))),
        }
    }
}

/// Sorted list of (image, mask) path pairs for one dataset split.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub split: Split,
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyRow {
    pub class_id: u8,
    pub name: String,
    pub pixel_count: u64,
    pub percent: f64,
}

/// Per-class pixel counts and percentages over a dataset split
/// (ignore pixels excluded from both).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub rows: Vec<FrequencyRow>,
    pub total_valid_pixels: u64,
}

impl FrequencyTable {
    pub fn percent_of(&self, class_id: u8) -> f64 {
        self.rows
            .iter()
            .find(|r| r.class_id == class_id)
            .map(|r| r.percent)
            .unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,name,pixel_count,percent\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4}\n",
                r.class_id, r.name, r.pixel_count, r.percent
            ));
        }
        out
    }
}
