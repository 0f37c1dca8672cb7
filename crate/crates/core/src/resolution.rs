//! Aspect-preserving rescale, sub-image grid selection and resampling of
//! the absolute position table.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{RowMix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ResizePlan {
    pub target_w: usize,
    pub target_h: usize,
    /// Rounding granularity in pixels.
    pub multiple: usize,
}

impl ResizePlan {
    /// Patch grid `(cols, rows)` for patch size `patch`.
    pub fn grid(&self, patch: usize) -> (usize, usize) {
        (self.target_w / patch, self.target_h / patch)
    }
}

fn round_to_multiple(x: f64, multiple: usize) -> usize {
    ((x / multiple as f64).round() as usize).max(1) * multiple
}

/// Rescales `W×H` to roughly `R_v²` pixels at the original aspect ratio:
/// targets `R_v·√(W/H)` and `R_v·√(H/W)`, each rounded to the nearest
/// positive multiple of `multiple`.
pub fn dynamic_resize(
    width: usize,
    height: usize,
    base_resolution: usize,
    multiple: usize,
) -> Result<ResizePlan> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyInput("image extents must be positive"));
    }
    if multiple == 0 || !base_resolution.is_multiple_of(multiple) {
        return Err(Error::Config(format!(
            "base resolution {base_resolution} is not a multiple of {multiple}"
        )));
    }
    let aspect = width as f64 / height as f64;
    let r = base_resolution as f64;
    Ok(ResizePlan {
        target_w: round_to_multiple(r * aspect.sqrt(), multiple),
        target_h: round_to_multiple(r / aspect.sqrt(), multiple),
        multiple,
    })
}

/// Sub-image layout: `m` columns by `n` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GridConfig {
    pub m: usize,
    pub n: usize,
}

impl GridConfig {
    pub fn tiles(&self) -> usize {
        self.m * self.n
    }
}

/// Ideal tile count `N_s = max(1, ⌊W·H / R_v²⌋)`.
pub fn ideal_subimages(width: usize, height: usize, base_resolution: usize) -> usize {
    ((width * height) / (base_resolution * base_resolution)).max(1)
}

const TIE_EPS: f64 = 1e-12;

/// Chooses the grid among factorizations of `N_s − 1`, `N_s`, `N_s + 1`
/// minimizing `|log(W/H) − log(m/n)|`. Ties go to fewer tiles, then to
/// the squarer grid, then to fewer columns.
pub fn subimage_grid(width: usize, height: usize, base_resolution: usize) -> Result<GridConfig> {
    if width == 0 || height == 0 || base_resolution == 0 {
        return Err(Error::EmptyInput("image extents must be positive"));
    }
    let ns = ideal_subimages(width, height, base_resolution);
    let target = (width as f64 / height as f64).ln();
    let mut best: Option<(f64, GridConfig)> = None;
    for count in [ns - 1, ns, ns + 1].into_iter().filter(|&c| c >= 1) {
        for m in (1..=count).filter(|m| count % m == 0) {
            let cand = GridConfig { m, n: count / m };
            let err = (target - (m as f64 / cand.n as f64).ln()).abs();
            let better = match best {
                None => true,
                Some((best_err, b)) => {
                    if err < best_err - TIE_EPS {
                        true
                    } else if err > best_err + TIE_EPS {
                        false
                    } else {
                        (cand.tiles(), cand.m.abs_diff(cand.n), cand.m)
                            < (b.tiles(), b.m.abs_diff(b.n), b.m)
                    }
                }
            };
            if better {
                best = Some((err, cand));
            }
        }
    }
    Ok(best.expect("candidate set is never empty").1)
}

/// Bilinear taps at fractional index `pos` on `0..len`, clamped to the
/// edge. Zero-weight taps are omitted so integer positions copy exactly.
fn linear_taps(pos: f64, len: usize) -> Vec<(usize, f64)> {
    let i0 = (pos.floor() as usize).min(len - 1);
    let frac = pos - i0 as f64;
    let i1 = (i0 + 1).min(len - 1);
    if frac <= 0.0 || i1 == i0 {
        vec![(i0, 1.0)]
    } else {
        vec![(i0, 1.0 - frac), (i1, frac)]
    }
}

/// Resampling plan for `E(x, y) = E_v(x·P_v/P_W, y·P_v/P_H)`.
///
/// Input rows are the table flattened `[x][y]` (`x·P_v + y`); output rows
/// follow the token order of a row-major patch grid (`y·P_W + x`).
pub fn pos_embed_plan(table_side: usize, grid_w: usize, grid_h: usize) -> Result<RowMix> {
    if table_side == 0 || grid_w == 0 || grid_h == 0 {
        return Err(Error::EmptyInput("position grid extents must be positive"));
    }
    let mut taps = Vec::with_capacity(grid_w * grid_h);
    for y in 0..grid_h {
        let ty = linear_taps((y * table_side) as f64 / grid_h as f64, table_side);
        for x in 0..grid_w {
            let tx = linear_taps((x * table_side) as f64 / grid_w as f64, table_side);
            let mut row = Vec::with_capacity(4);
            for &(xi, wx) in &tx {
                for &(yi, wy) in &ty {
                    row.push((xi * table_side + yi, wx * wy));
                }
            }
            taps.push(row);
        }
    }
    Ok(RowMix {
        in_rows: table_side * table_side,
        taps,
    })
}

/// Resizes a `[P_v, P_v, d]` table to `[P_W, P_H, d]` by bilinear
/// interpolation with edge clamping.
pub fn resize_pos_embed(table: &Tensor, grid_w: usize, grid_h: usize) -> Result<Tensor> {
    let &[side, side2, d] = table.shape() else {
        return Err(Error::Shape(format!(
            "position table must be [P_v, P_v, d], got {:?}",
            table.shape()
        )));
    };
    if side != side2 {
        return Err(Error::Shape(format!(
            "position table must be square, got {side}x{side2}"
        )));
    }
    let flat = table.clone().reshape([side * side, d])?;
    let tokens = pos_embed_plan(side, grid_w, grid_h)?.apply(&flat)?;
    // Token order is [y][x]; the table layout is [x][y].
    let mut out = vec![0.0; grid_w * grid_h * d];
    for y in 0..grid_h {
        for x in 0..grid_w {
            out[(x * grid_h + y) * d..(x * grid_h + y + 1) * d]
                .copy_from_slice(tokens.row(y * grid_w + x));
        }
    }
    Tensor::new([grid_w, grid_h, d], out)
}

/// Bilinear resampling of an interleaved RGB image (`[H, W, 3]` row-major)
/// with half-pixel centres.
pub fn resample_bilinear(
    pixels: &[f64],
    width: usize,
    height: usize,
    new_w: usize,
    new_h: usize,
) -> Vec<f64> {
    if width == new_w && height == new_h {
        return pixels.to_vec();
    }
    let coord = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(new_w * new_h * 3);
    for oy in 0..new_h {
        let (y0, y1, fy) = coord(oy, height, new_h);
        for ox in 0..new_w {
            let (x0, x1, fx) = coord(ox, width, new_w);
            for c in 0..3 {
                let p = |y: usize, x: usize| pixels[(y * width + x) * 3 + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Cuts an image into `m × n` tiles (row-major), distributing remainders
/// so the tiles cover every pixel. Returns `(pixels, width, height)` per tile.
pub fn split_tiles(
    pixels: &[f64],
    width: usize,
    height: usize,
    grid: GridConfig,
) -> Vec<(Vec<f64>, usize, usize)> {
    let bounds = |len: usize, parts: usize| -> Vec<(usize, usize)> {
        (0..parts)
            .map(|i| (i * len / parts, (i + 1) * len / parts))
            .collect()
    };
    let mut tiles = Vec::with_capacity(grid.tiles());
    for &(y0, y1) in &bounds(height, grid.n) {
        for &(x0, x1) in &bounds(width, grid.m) {
            let mut tile = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
            for y in y0..y1 {
                tile.extend_from_slice(&pixels[(y * width + x0) * 3..(y * width + x1) * 3]);
            }
            tiles.push((tile, x1 - x0, y1 - y0));
        }
    }
    tiles
}
