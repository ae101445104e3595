//! Resolution-preserving sliding-window inference.
//!
//! Large rasters are processed as overlapping native-resolution tiles; the
//! per-tile class distributions are averaged uniformly wherever windows
//! overlap, which suppresses boundary artifacts without ever resizing the
//! input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, LabelMask, ProbabilityMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct TileSpec {
    #[serde(default = "default_tile")]
    pub tile_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_tile() -> usize {
    1024
}

fn default_stride() -> usize {
    768
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            tile_size: default_tile(),
            stride: default_stride(),
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.tile_size {
            return Err(Error::Config(format!(
                "stride must satisfy 0 < stride <= tile_size, got stride {} tile {}",
                self.stride, self.tile_size
            )));
        }
        if self.tile_size % 32 != 0 {
            return Err(Error::Config(format!(
                "tile_size must be divisible by 32, got {}",
                self.tile_size
            )));
        }
        Ok(())
    }
}

/// The planned window set for one image: origins in raster order plus the
/// per-pixel count of covering windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub origins: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
    pub tile_size: usize,
    /// N_ov: number of windows covering each pixel; >= 1 everywhere.
    pub overlap_counts: Vec<u32>,
}

impl TileGrid {
    pub fn tile_count(&self) -> usize {
        self.origins.len()
    }
}

/// Window origins along one axis: 0, S, 2S, ... while origin + tile fits;
/// if the last origin stops short of the edge, one clamped origin at
/// dim - tile is appended.
fn axis_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile <= dim {
        out.push(o);
        o += stride;
    }
    let last = *out.last().expect("dim >= tile guarantees one origin");
    if last + tile < dim {
        out.push(dim - tile);
    }
    out
}

/// Plans the clamped sliding-window grid covering an height × width raster.
pub fn plan_tiles(height: usize, width: usize, spec: &TileSpec) -> Result<TileGrid> {
    spec.validate()?;
    let t = spec.tile_size;
    if height < t || width < t {
        return Err(Error::Validation(format!(
            "image {height}x{width} is smaller than tile size {t}; pad the input first"
        )));
    }
    let rows = axis_origins(height, t, spec.stride);
    let cols = axis_origins(width, t, spec.stride);
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    let mut overlap_counts = vec![0u32; height * width];
    for &r in &rows {
        for &c in &cols {
            origins.push((r, c));
            for rr in r..r + t {
                let base = rr * width + c;
                for v in &mut overlap_counts[base..base + t] {
                    *v += 1;
                }
            }
        }
    }
    debug_assert!(overlap_counts.iter().all(|&v| v >= 1));
    Ok(TileGrid {
        origins,
        height,
        width,
        tile_size: t,
        overlap_counts,
    })
}

/// Anything that can map a tile-sized image to per-pixel class distributions.
pub trait TileModel: Sync {
    fn num_classes(&self) -> usize;
    fn predict_probs(&self, tile: &Image) -> Result<ProbabilityMap>;
}

/// Runs the model over every window of the grid and averages overlapping
/// predictions uniformly: output = sum of covering tile distributions / N_ov.
///
/// Tiles are independent forward passes; with `workers > 1` they run on a
/// rayon pool but are always merged in ascending tile index order, so the
/// result is identical to the sequential path.
pub fn tiled_inference(
    model: &(impl TileModel + ?Sized),
    image: &Image,
    spec: &TileSpec,
    workers: usize,
) -> Result<ProbabilityMap> {
    let grid = plan_tiles(image.height, image.width, spec)?;
    let classes = model.num_classes();
    let t = spec.tile_size;

    let run_tile = |&(r, c): &(usize, usize)| -> Result<ProbabilityMap> {
        let tile = extract_tile(image, r, c, t);
        let probs = model.predict_probs(&tile)?;
        if probs.height != t || probs.width != t || probs.num_classes != classes {
            return Err(Error::Contract(format!(
                "model returned {}x{}x{} for a {t}x{t} tile with {classes} classes",
                probs.height, probs.width, probs.num_classes
            )));
        }
        Ok(probs)
    };

    let tile_outputs: Vec<ProbabilityMap> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| grid.origins.par_iter().map(run_tile).collect::<Result<_>>())?
    } else {
        grid.origins
            .iter()
            .map(run_tile)
            .collect::<Result<Vec<_>>>()?
    };

    let (h, w) = (image.height, image.width);
    let mut sum = vec![0.0f64; h * w * classes];
    for ((r0, c0), probs) in grid.origins.iter().zip(&tile_outputs) {
        for tr in 0..t {
            for tc in 0..t {
                let src = (tr * t + tc) * classes;
                let dst = ((r0 + tr) * w + (c0 + tc)) * classes;
                for k in 0..classes {
                    sum[dst + k] += probs.data[src + k];
                }
            }
        }
    }
    for px in 0..h * w {
        let n = grid.overlap_counts[px] as f64;
        for k in 0..classes {
            sum[px * classes + k] /= n;
        }
    }
    Ok(ProbabilityMap {
        height: h,
        width: w,
        num_classes: classes,
        data: sum,
    })
}

fn extract_tile(image: &Image, r0: usize, c0: usize, t: usize) -> Image {
    let mut out = Image::zeros(t, t, image.channels);
    for ch in 0..image.channels {
        for r in 0..t {
            for c in 0..t {
                out.set(r, c, ch, image.get(r0 + r, c0 + c, ch));
            }
        }
    }
    out
}

/// Per-pixel argmax; ties broken by the lowest class id.
pub fn argmax_mask(probs: &ProbabilityMap) -> LabelMask {
    let mut mask = LabelMask::filled(probs.height, probs.width, 0);
    for px in 0..probs.height * probs.width {
        let row = &probs.data[px * probs.num_classes..(px + 1) * probs.num_classes];
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        mask.data[px] = best as u8;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(tile: usize, stride: usize) -> TileSpec {
        TileSpec {
            tile_size: tile,
            stride,
        }
    }

    /// Test double that paints a fixed class distribution everywhere.
    struct ConstantModel {
        probs: Vec<f64>,
    }

    impl TileModel for ConstantModel {
        fn num_classes(&self) -> usize {
            self.probs.len()
        }
        fn predict_probs(&self, tile: &Image) -> Result<ProbabilityMap> {
            let mut out = ProbabilityMap::zeros(tile.height, tile.width, self.probs.len());
            for px in 0..tile.height * tile.width {
                out.data[px * self.probs.len()..(px + 1) * self.probs.len()]
                    .copy_from_slice(&self.probs);
            }
            Ok(out)
        }
    }

    #[test]
    fn published_grid_arithmetic_for_large_raster() {
        // 3000x4000 at tile 1024 / stride 768: rows {0,768,1536,1976},
        // cols {0,768,1536,2304,2976} -> 20 windows.
        let grid = plan_tiles(3000, 4000, &spec(1024, 768)).unwrap();
        assert_eq!(grid.tile_count(), 20);
        let rows: std::collections::BTreeSet<usize> =
            grid.origins.iter().map(|o| o.0).collect();
        let cols: std::collections::BTreeSet<usize> =
            grid.origins.iter().map(|o| o.1).collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![0, 768, 1536, 1976]);
        assert_eq!(
            cols.into_iter().collect::<Vec<_>>(),
            vec![0, 768, 1536, 2304, 2976]
        );
        assert!(grid.overlap_counts.iter().all(|&v| v >= 1));
    }

    #[test]
    fn exact_fit_is_single_tile() {
        let grid = plan_tiles(1024, 1024, &spec(1024, 768)).unwrap();
        assert_eq!(grid.origins, vec![(0, 0)]);
        assert!(grid.overlap_counts.iter().all(|&v| v == 1));
    }

    #[test]
    fn one_pixel_over_needs_clamped_second_row() {
        let grid = plan_tiles(1025, 1024, &spec(1024, 768)).unwrap();
        let rows: Vec<usize> = {
            let mut r: Vec<usize> = grid.origins.iter().map(|o| o.0).collect();
            r.dedup();
            r
        };
        assert_eq!(rows, vec![0, 1]);
        assert_eq!(grid.tile_count(), 2);
        // Exhaustive coverage check by marking pixels.
        let mut marked = vec![0u32; 1025 * 1024];
        for &(r0, c0) in &grid.origins {
            for r in r0..r0 + 1024 {
                for c in c0..c0 + 1024 {
                    marked[r * 1024 + c] += 1;
                }
            }
        }
        assert_eq!(marked, grid.overlap_counts);
        assert!(marked.iter().all(|&v| v >= 1));
    }

    #[test]
    fn too_small_input_is_rejected() {
        let err = plan_tiles(100, 2000, &spec(1024, 768)).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn constant_model_unaffected_by_overlap() {
        let model = ConstantModel {
            probs: vec![0.2, 0.5, 0.3],
        };
        let image = Image::zeros(80, 112, 3);
        let out = tiled_inference(&model, &image, &spec(64, 48), 1).unwrap();
        out.validate().unwrap();
        for px in 0..80 * 112 {
            for (k, &q) in [0.2, 0.5, 0.3].iter().enumerate() {
                assert!((out.data[px * 3 + k] - q).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_tile_output_is_bitwise_model_output() {
        let model = ConstantModel {
            probs: vec![0.25, 0.75],
        };
        let image = Image::zeros(64, 64, 3);
        let direct = model.predict_probs(&image).unwrap();
        let tiled = tiled_inference(&model, &image, &spec(64, 64), 1).unwrap();
        assert_eq!(direct.data, tiled.data);
    }

    #[test]
    fn overlap_band_is_arithmetic_mean_of_two_tiles() {
        // A model whose output depends on the tile's left column: the two
        // horizontal windows disagree, so the overlap band must average them.
        struct ColumnModel;
        impl TileModel for ColumnModel {
            fn num_classes(&self) -> usize {
                2
            }
            fn predict_probs(&self, tile: &Image) -> Result<ProbabilityMap> {
                // Encodes the tile identity via its first pixel value.
                let p0 = if tile.get(0, 0, 0) > 0.5 { 0.9 } else { 0.1 };
                let mut out = ProbabilityMap::zeros(tile.height, tile.width, 2);
                for px in 0..tile.height * tile.width {
                    out.data[px * 2] = p0;
                    out.data[px * 2 + 1] = 1.0 - p0;
                }
                Ok(out)
            }
        }
        // 64x96 image, tiles at col 0 and col 32: overlap columns 32..64.
        let mut image = Image::zeros(64, 96, 1);
        for r in 0..64 {
            image.set(r, 32, 0, 1.0); // tile 2's first pixel reads 1.0
        }
        let out = tiled_inference(&ColumnModel, &image, &spec(64, 32), 1).unwrap();
        // Left-only region: 0.1; right-only region: 0.9; overlap: mean 0.5.
        assert!((out.data[(10 * 96 + 5) * 2] - 0.1).abs() < 1e-12);
        assert!((out.data[(10 * 96 + 80) * 2] - 0.9).abs() < 1e-12);
        assert!((out.data[(10 * 96 + 40) * 2] - 0.5).abs() < 1e-12);
        out.validate().unwrap();
    }

    #[test]
    fn parallel_merge_matches_sequential_bitwise() {
        struct NoisyModel;
        impl TileModel for NoisyModel {
            fn num_classes(&self) -> usize {
                3
            }
            fn predict_probs(&self, tile: &Image) -> Result<ProbabilityMap> {
                let mut out = ProbabilityMap::zeros(tile.height, tile.width, 3);
                for px in 0..tile.height * tile.width {
                    let a = 0.3 + 0.4 * tile.data[px % tile.data.len()];
                    out.data[px * 3] = a;
                    out.data[px * 3 + 1] = (1.0 - a) * 0.6;
                    out.data[px * 3 + 2] = (1.0 - a) * 0.4;
                }
                Ok(out)
            }
        }
        let spec_ = spec(32, 24);
        let mut image = Image::zeros(96, 128, 1);
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = (i % 17) as f64 / 17.0;
        }
        let seq = tiled_inference(&NoisyModel, &image, &spec_, 1).unwrap();
        let par = tiled_inference(&NoisyModel, &image, &spec_, 4).unwrap();
        assert_eq!(seq.data, par.data);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let probs = ProbabilityMap {
            height: 1,
            width: 2,
            num_classes: 3,
            data: vec![0.4, 0.4, 0.2, 0.1, 0.45, 0.45],
        };
        let mask = argmax_mask(&probs);
        assert_eq!(mask.data, vec![0, 1]);
    }

    proptest! {
        // Coverage: the sum of window indicators equals the stored N_ov and
        // every pixel is covered at least once.
        #[test]
        fn grid_covers_every_pixel(
            h in 64usize..200,
            w in 64usize..200,
            stride in 16usize..=64,
        ) {
            let tile = 64;
            let s = spec(tile, stride.min(tile));
            let grid = plan_tiles(h, w, &s).unwrap();
            let mut marked = vec![0u32; h * w];
            for &(r0, c0) in &grid.origins {
                prop_assert!(r0 + tile <= h && c0 + tile <= w);
                for r in r0..r0 + tile {
                    for c in c0..c0 + tile {
                        marked[r * w + c] += 1;
                    }
                }
            }
            prop_assert_eq!(&marked, &grid.overlap_counts);
            prop_assert!(marked.iter().all(|&v| v >= 1));
            // Origins strictly increasing in raster order.
            for pair in grid.origins.windows(2) {
                prop_assert!(pair[0] < pair[1]);
            }
        }
    }
}
