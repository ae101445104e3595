use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::types::{ClassTable, Image, LabelMask};

/// How one class is rendered and placed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassTexture {
    pub base_rgb: [f64; 3],
    /// High-frequency per-pixel noise amplitude. Damage classes get large
    /// amplitudes so their evidence lives in texture, not mean color —
    /// averaging (downsampling) collapses them toward the intact-roof gray.
    pub noise_amp: f64,
    /// Blob radius range in pixels.
    pub blob_radius: (f64, f64),
    /// Axis ratio of the painted ellipse; 1.0 is round, larger is strip-like.
    #[serde(default = "default_elongation")]
    pub elongation: f64,
}

fn default_elongation() -> f64 {
    1.0
}

/// Scene recipe: size, target class-frequency vector, per-class textures,
/// and which classes are composited as small blobs inside a host class.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Target pixel-share per class id; must sum to ~1.
    pub frequencies: Vec<f64>,
    pub textures: Vec<ClassTexture>,
    /// Class painted as the canvas before any blobs.
    pub background_class: u8,
    /// Classes placed as small blobs centered on `rare_host_class` pixels.
    pub rare_set: Vec<u8>,
    /// The "no-damage" class that hosts rare blobs.
    pub rare_host_class: u8,
    /// Amplitude of the smooth illumination field shared by all classes.
    #[serde(default = "default_shading")]
    pub shading_amp: f64,
}

fn default_shading() -> f64 {
    0.05
}

impl SynthSpec {
    /// Spec for the 11-class table at the published class-share ratios:
    /// background 52.51%, tree 22.05%, water 8.13%, minor 2.63%, major 1.68%,
    /// road-blocked 1.59%, destruction 1.44%, pool 0.06%; the remaining share
    /// is split over no-damage buildings, clear roads, and vehicles.
    pub fn default_11(height: usize, width: usize) -> Self {
        let frequencies = vec![
            0.5251, // Background
            0.0813, // Water
            0.0600, // Building-No-Damage
            0.0263, // Building-Minor-Damage
            0.0168, // Building-Major-Damage
            0.0144, // Building-Total-Destruction
            0.0350, // Road-Clear
            0.0159, // Road-Blocked
            0.2205, // Tree
            0.0006, // Pool
            0.0041, // Vehicle
        ];
        let tex = |rgb: [f64; 3], amp: f64, rad: (f64, f64), elong: f64| ClassTexture {
            base_rgb: rgb,
            noise_amp: amp,
            blob_radius: rad,
            elongation: elong,
        };
        let textures = vec![
            tex([0.45, 0.40, 0.30], 0.06, (0.0, 0.0), 1.0), // background canvas
            tex([0.10, 0.25, 0.55], 0.02, (18.0, 40.0), 1.5), // water
            tex([0.55, 0.55, 0.55], 0.03, (10.0, 22.0), 1.3), // building, intact roof
            tex([0.50, 0.52, 0.62], 0.12, (3.0, 7.0), 1.0), // minor: tarp tint + speckle
            tex([0.58, 0.48, 0.42], 0.20, (3.0, 7.0), 1.0), // major: exposed wood + speckle
            tex([0.40, 0.38, 0.36], 0.30, (3.0, 8.0), 1.0), // destruction: rubble
            tex([0.30, 0.30, 0.32], 0.02, (6.0, 10.0), 8.0), // road, clear
            tex([0.34, 0.33, 0.30], 0.15, (5.0, 9.0), 8.0), // road, debris
            tex([0.15, 0.40, 0.15], 0.10, (12.0, 30.0), 1.0), // tree
            tex([0.25, 0.75, 0.80], 0.02, (3.0, 5.0), 1.0), // pool
            tex([0.70, 0.20, 0.20], 0.05, (2.0, 4.0), 1.8), // vehicle
        ];
        SynthSpec {
            height,
            width,
            frequencies,
            textures,
            background_class: 0,
            rare_set: vec![3, 4, 5],
            rare_host_class: 2,
            shading_amp: 0.05,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.frequencies.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation("scene dimensions must be positive".into()));
        }
        if self.frequencies.len() != self.textures.len() {
            return Err(Error::Validation(format!(
                "frequency vector has {} entries but {} textures given",
                self.frequencies.len(),
                self.textures.len()
            )));
        }
        let sum: f64 = self.frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::Validation(format!(
                "class frequencies must sum to ~1, got {sum}"
            )));
        }
        if self.frequencies.iter().any(|&f| f < 0.0) {
            return Err(Error::Validation("class frequencies must be non-negative".into()));
        }
        let c = self.frequencies.len();
        for &id in self
            .rare_set
            .iter()
            .chain([&self.background_class, &self.rare_host_class])
        {
            if id as usize >= c {
                return Err(Error::Validation(format!(
                    "class id {id} out of range for {c} classes"
                )));
            }
        }
        Ok(())
    }

    /// Consistency check against a class table (id range only).
    pub fn check_table(&self, table: &ClassTable) -> Result<()> {
        if self.num_classes() != table.num_classes() {
            return Err(Error::Config(format!(
                "synth spec has {} classes, class table has {}",
                self.num_classes(),
                table.num_classes()
            )));
        }
        Ok(())
    }
}

/// Deterministic scene synthesis: pure function of (seed, spec).
///
/// Classes are composited as ellipse blobs until each class's painted pixel
/// count reaches its target budget, so emitted frequencies track the spec's
/// targets. Rare classes are placed last, centered on host-class pixels.
pub fn generate_synthetic_scene(seed: u64, spec: &SynthSpec) -> Result<(Image, LabelMask)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n_classes = spec.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let bg = spec.background_class;
    let mut mask = LabelMask::filled(h, w, bg);
    let mut counts = vec![0u64; n_classes];
    counts[bg as usize] = (h * w) as u64;

    let total = (h * w) as f64;
    let budget: Vec<u64> = spec.frequencies.iter().map(|f| (f * total) as u64).collect();
    let rare_budget: u64 = spec.rare_set.iter().map(|&c| budget[c as usize]).sum();

    // Non-background, non-rare classes painted largest budget first; the host
    // class is over-painted by the rare budget it will later donate. Later
    // blobs steal pixels from earlier classes, so two top-up passes follow to
    // pull every class back to its budget.
    let mut order: Vec<u8> = (0..n_classes as u8)
        .filter(|c| *c != bg && !spec.rare_set.contains(c))
        .collect();
    order.sort_by_key(|&c| std::cmp::Reverse(budget[c as usize]));

    for pass in 0..3 {
        for &c in &order {
            let mut target = budget[c as usize];
            if pass == 0 && c == spec.rare_host_class {
                target += rare_budget;
            }
            paint_until(&mut mask, &mut counts, c, target, spec, &mut rng, None);
        }
        for &c in &spec.rare_set {
            paint_until(
                &mut mask,
                &mut counts,
                c,
                budget[c as usize],
                spec,
                &mut rng,
                Some(spec.rare_host_class),
            );
        }
    }

    let image = render(&mask, spec, &mut rng);
    Ok((image, mask))
}

const MAX_BLOBS_PER_CLASS: usize = 20_000;

fn paint_until(
    mask: &mut LabelMask,
    counts: &mut [u64],
    class: u8,
    target: u64,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    host: Option<u8>,
) {
    let (h, w) = (mask.height, mask.width);
    let tex = &spec.textures[class as usize];
    if tex.blob_radius.1 <= 0.0 {
        return;
    }
    let mut blobs = 0;
    while counts[class as usize] < target && blobs < MAX_BLOBS_PER_CLASS {
        blobs += 1;
        let (cr, cc) = match host {
            Some(host_class) => match pick_pixel_of_class(mask, host_class, rng) {
                Some(p) => p,
                None => (rng.random_range(0..h), rng.random_range(0..w)),
            },
            None => (rng.random_range(0..h), rng.random_range(0..w)),
        };
        let r_major = rng.random_range(tex.blob_radius.0..=tex.blob_radius.1);
        let r_minor = (r_major / tex.elongation).max(1.0);
        // Strips get a random orientation (axis swap).
        let (ry, rx) = if rng.random_range(0.0..1.0) < 0.5 {
            (r_major, r_minor)
        } else {
            (r_minor, r_major)
        };
        // The last blob is truncated so the painted count lands on target.
        let remaining = target - counts[class as usize];
        paint_ellipse(mask, counts, class, cr as f64, cc as f64, ry, rx, remaining);
    }
}

fn pick_pixel_of_class(mask: &LabelMask, class: u8, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    // Rejection sample; falls back to a scan-free None after a bounded number
    // of misses so an absent host cannot stall generation.
    for _ in 0..256 {
        let r = rng.random_range(0..mask.height);
        let c = rng.random_range(0..mask.width);
        if mask.get(r, c) == class {
            return Some((r, c));
        }
    }
    None
}

fn paint_ellipse(
    mask: &mut LabelMask,
    counts: &mut [u64],
    class: u8,
    cr: f64,
    cc: f64,
    ry: f64,
    rx: f64,
    limit: u64,
) {
    let mut remaining = limit;
    let r0 = (cr - ry).floor().max(0.0) as usize;
    let r1 = ((cr + ry).ceil() as usize).min(mask.height.saturating_sub(1));
    let c0 = (cc - rx).floor().max(0.0) as usize;
    let c1 = ((cc + rx).ceil() as usize).min(mask.width.saturating_sub(1));
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dy = (r as f64 - cr) / ry;
            let dx = (c as f64 - cc) / rx;
            if dy * dy + dx * dx <= 1.0 {
                let old = mask.get(r, c);
                if old != class {
                    if remaining == 0 {
                        return;
                    }
                    remaining -= 1;
                    counts[old as usize] -= 1;
                    counts[class as usize] += 1;
                    mask.set(r, c, class);
                }
            }
        }
    }
}

/// Splitmix64-style integer hash; the basis for per-pixel texture noise.
fn hash64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Uniform noise in [-1, 1] for a (seed, row, col, channel) cell.
fn cell_noise(seed: u64, r: usize, c: usize, ch: usize) -> f64 {
    let key = seed
        .wrapping_mul(0x100000001b3)
        .wrapping_add((r as u64) << 24)
        .wrapping_add((c as u64) << 4)
        .wrapping_add(ch as u64);
    (hash64(key) >> 11) as f64 / ((1u64 << 53) as f64) * 2.0 - 1.0
}

const SHADING_LATTICE: usize = 8;

fn render(mask: &LabelMask, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (mask.height, mask.width);
    let noise_seed: u64 = rng.random();
    // Smooth illumination field: bilinear interpolation of a coarse lattice.
    let lat = SHADING_LATTICE;
    let mut lattice = vec![0.0f64; (lat + 1) * (lat + 1)];
    for v in lattice.iter_mut() {
        *v = rng.random_range(-spec.shading_amp..=spec.shading_amp);
    }
    let mut image = Image::zeros(h, w, 3);
    for r in 0..h {
        let fy = r as f64 / h as f64 * lat as f64;
        let y0 = fy.floor() as usize;
        let wy = fy - y0 as f64;
        for c in 0..w {
            let fx = c as f64 / w as f64 * lat as f64;
            let x0 = fx.floor() as usize;
            let wx = fx - x0 as f64;
            let shade = lattice[y0 * (lat + 1) + x0] * (1.0 - wy) * (1.0 - wx)
                + lattice[y0 * (lat + 1) + x0 + 1] * (1.0 - wy) * wx
                + lattice[(y0 + 1) * (lat + 1) + x0] * wy * (1.0 - wx)
                + lattice[(y0 + 1) * (lat + 1) + x0 + 1] * wy * wx;
            let tex = &spec.textures[mask.get(r, c) as usize];
            for ch in 0..3 {
                let v = tex.base_rgb[ch]
                    + tex.noise_amp * cell_noise(noise_seed, r, c, ch)
                    + shade;
                image.set(r, c, ch, v.clamp(0.0, 1.0));
            }
        }
    }
    image
}
