//! Adaptive N-gridding: choose a tile grid `(n_w, n_h)` with `n_w + n_h <= N`
//! that minimizes aspect-ratio change times relative pixel-count change when
//! an image is resized onto `n_w·s × n_h·s` (`s` = grid side).
//!
//! Candidates are compared exactly. With `W, H` the image size and `s` the
//! grid side, the squared objective of candidate `(a, b)` is
//!
//! ```text
//!   (aH − bW)² · (ab·s² − WH)²  /  (ab · W³H³)
//! ```
//!
//! and `W³H³` is common to every candidate, so the comparison reduces to
//! integer cross-multiplication.
//!
//! The product objective is zero whenever either factor is zero, so a
//! `2:1` image ties `(2, 1)` (no aspect change) with `(1, 2)` (no pixel
//! change). [`TieBreak::AspectThenScan`], the default, resolves exact ties
//! by the smaller aspect change; [`TieBreak::ScanOrder`] keeps the plain
//! first-strict-improvement scan.

use std::cmp::Ordering;

use num_bigint::BigUint;
use num_rational::BigRational;
use serde::Serialize;

use crate::schema::BBox;

pub const DEFAULT_GRID_SIDE: u32 = 336;
pub const DEFAULT_SIZE_LIMIT: u32 = 8;

/// How candidates with exactly equal objective are ordered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieBreak {
    /// Smaller squared aspect change wins, then scan order.
    #[default]
    AspectThenScan,
    /// First candidate in scan order wins.
    ScanOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridConfig {
    pub grid_side: u32,
    pub size_limit: u32,
    pub tie_break: TieBreak,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { grid_side: DEFAULT_GRID_SIDE, size_limit: DEFAULT_SIZE_LIMIT, tie_break: TieBreak::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("grid side must be positive")]
    ZeroGridSide,
    #[error("size limit must be at least 2, got {0}")]
    SizeLimitTooSmall(u32),
}

impl GridConfig {
    pub fn new(grid_side: u32, size_limit: u32) -> Result<Self, GridError> {
        let cfg = GridConfig { grid_side, size_limit, tie_break: TieBreak::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_tie_break(mut self, tie_break: TieBreak) -> Self {
        self.tie_break = tie_break;
        self
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.grid_side == 0 {
            return Err(GridError::ZeroGridSide);
        }
        if self.size_limit < 2 {
            return Err(GridError::SizeLimitTooSmall(self.size_limit));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridPlan {
    pub n_w: u32,
    pub n_h: u32,
    pub delta_aspect: f64,
    pub delta_pixel: f64,
    pub objective: f64,
    pub tiles: Vec<BBox>,
    pub overview: BBox,
}

/// Squared objective of one candidate, kept as an exact unreduced fraction.
#[derive(Clone, Debug)]
pub struct SquaredObjective {
    pub numer: BigUint,
    pub denom: BigUint,
    /// `(aH − bW)²` and `ab`: the squared aspect change is their ratio over `WH`.
    aspect_numer: u128,
    cells: u64,
}

impl SquaredObjective {
    /// `Δ_aspect² · Δ_pixel²` for candidate `(n_w, n_h)`.
    pub fn of(n_w: u32, n_h: u32, width: u32, height: u32, grid_side: u32) -> Self {
        let (a, b) = (i128::from(n_w), i128::from(n_h));
        let (w, h, s) = (i128::from(width), i128::from(height), i128::from(grid_side));
        let aspect = (a * h - b * w).unsigned_abs();
        let pixel = (a * b * s * s - w * h).unsigned_abs();
        let numer = BigUint::from(aspect).pow(2) * BigUint::from(pixel).pow(2);
        // The W³H³ factor is shared by every candidate; fold it in so the
        // value is the true squared objective.
        let wh = BigUint::from(width) * BigUint::from(height);
        let denom = BigUint::from(n_w) * BigUint::from(n_h) * wh.pow(3);
        SquaredObjective { numer, denom, aspect_numer: aspect * aspect, cells: u64::from(n_w) * u64::from(n_h) }
    }

    /// Orders by objective value.
    pub fn cmp(&self, other: &Self) -> Ordering {
        (&self.numer * &other.denom).cmp(&(&other.numer * &self.denom))
    }

    /// Orders by squared aspect change alone.
    pub fn cmp_aspect(&self, other: &Self) -> Ordering {
        (BigUint::from(self.aspect_numer) * other.cells).cmp(&(BigUint::from(other.aspect_numer) * self.cells))
    }

    pub fn is_zero(&self) -> bool {
        self.numer == BigUint::from(0u32)
    }

    pub fn to_rational(&self) -> BigRational {
        BigRational::new(self.numer.clone().into(), self.denom.clone().into())
    }
}

/// Aspect and pixel deltas of a candidate as floats, for reporting. Each is
/// rounded once from its exact integer form, so exact zeros stay zero.
pub fn deltas(n_w: u32, n_h: u32, width: u32, height: u32, grid_side: u32) -> (f64, f64) {
    let (a, b) = (i128::from(n_w), i128::from(n_h));
    let (w, h, s) = (i128::from(width), i128::from(height), i128::from(grid_side));
    let aspect_num = (a * h - b * w).unsigned_abs() as f64;
    let aspect = aspect_num / ((a * b * w * h) as f64).sqrt();
    let pixel = (a * b * s * s - w * h).unsigned_abs() as f64 / (w * h) as f64;
    (aspect, pixel)
}

/// Admissible `(n_w, n_h)` pairs in scan order: `n_w` ascending outer,
/// `n_h` ascending inner, `n_w + n_h <= N`.
pub fn admissible(size_limit: u32) -> impl Iterator<Item = (u32, u32)> {
    (1..size_limit).flat_map(move |a| (1..=size_limit - a).map(move |b| (a, b)))
}

/// Best grid for a `width × height` image. Exact ties follow `cfg.tie_break`.
pub fn optimal_grid(width: u32, height: u32, cfg: &GridConfig) -> Result<GridPlan, GridError> {
    cfg.validate()?;
    if width == 0 || height == 0 {
        return Err(GridError::EmptyImage { width, height });
    }
    let (n_w, n_h, _) = best_pair(width, height, cfg);
    Ok(plan_for(n_w, n_h, width, height, cfg.grid_side))
}

/// Best pair plus its exact squared objective.
pub fn best_pair(width: u32, height: u32, cfg: &GridConfig) -> (u32, u32, SquaredObjective) {
    let mut best: Option<(u32, u32, SquaredObjective)> = None;
    for (a, b) in admissible(cfg.size_limit) {
        let obj = SquaredObjective::of(a, b, width, height, cfg.grid_side);
        let better = match &best {
            None => true,
            Some((_, _, cur)) => match (obj.cmp(cur), cfg.tie_break) {
                (Ordering::Less, _) => true,
                (Ordering::Equal, TieBreak::AspectThenScan) => obj.cmp_aspect(cur) == Ordering::Less,
                _ => false,
            },
        };
        if better {
            best = Some((a, b, obj));
        }
    }
    best.expect("size limit >= 2 admits (1, 1)")
}

pub fn plan_for(n_w: u32, n_h: u32, width: u32, height: u32, grid_side: u32) -> GridPlan {
    let (delta_aspect, delta_pixel) = deltas(n_w, n_h, width, height, grid_side);
    let s = i64::from(grid_side);
    GridPlan {
        n_w,
        n_h,
        delta_aspect,
        delta_pixel,
        objective: delta_aspect * delta_pixel,
        tiles: tile_geometry(n_w, n_h, grid_side),
        overview: BBox::new(0, 0, s, s),
    }
}

/// Row-major tiles of the resized `n_w·s × n_h·s` frame.
pub fn tile_geometry(n_w: u32, n_h: u32, grid_side: u32) -> Vec<BBox> {
    let s = i64::from(grid_side);
    (0..i64::from(n_h))
        .flat_map(|i| (0..i64::from(n_w)).map(move |j| BBox::new(j * s, i * s, (j + 1) * s, (i + 1) * s)))
        .collect()
}

/// Upper bound on `n_w · n_h` under `n_w + n_h <= N`.
pub fn max_grid_count(size_limit: u32) -> u64 {
    let n = u64::from(size_limit);
    n * n / 4
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(w: u32, h: u32, n: u32) -> GridPlan {
        optimal_grid(w, h, &GridConfig::new(DEFAULT_GRID_SIDE, n).unwrap()).unwrap()
    }

    #[test]
    fn exact_fits_have_zero_objective() {
        let p = plan(336, 336, 8);
        assert_eq!((p.n_w, p.n_h, p.objective), (1, 1, 0.0));
        let p = plan(672, 336, 8);
        assert_eq!((p.n_w, p.n_h, p.objective), (2, 1, 0.0));
    }

    #[test]
    fn scan_order_takes_the_transposed_zero() {
        let cfg = GridConfig::new(336, 8).unwrap().with_tie_break(TieBreak::ScanOrder);
        let p = optimal_grid(672, 336, &cfg).unwrap();
        // (1, 2) has no pixel change, so its product is zero too.
        assert_eq!((p.n_w, p.n_h, p.objective), (1, 2, 0.0));
        assert!(p.delta_aspect > 0.0);
    }

    #[test]
    fn limit_two_forces_single_tile() {
        for (w, h) in [(10, 5000), (5000, 10), (336, 336), (4000, 4000)] {
            let p = plan(w, h, 2);
            assert_eq!((p.n_w, p.n_h), (1, 1));
        }
    }

    #[test]
    fn admissible_set_is_inclusive() {
        assert_eq!(admissible(8).count(), 28);
        assert_eq!(admissible(2).collect::<Vec<_>>(), [(1, 1)]);
        assert!(admissible(8).all(|(a, b)| a + b <= 8));
        assert!(admissible(8).any(|(a, b)| (a, b) == (4, 4)));
    }

    #[test]
    fn tiles_are_row_major() {
        assert_eq!(tile_geometry(1, 1, 336), [BBox::new(0, 0, 336, 336)]);
        assert_eq!(
            tile_geometry(2, 1, 336),
            [BBox::new(0, 0, 336, 336), BBox::new(336, 0, 672, 336)]
        );
        let t = tile_geometry(3, 2, 336);
        assert_eq!(t.len(), 6);
        assert_eq!(t[3], BBox::new(0, 336, 336, 672));
    }

    #[test]
    fn grid_count_bound() {
        assert_eq!(max_grid_count(8), 16);
        assert_eq!(max_grid_count(2), 1);
        assert_eq!(max_grid_count(7), 12);
    }

    #[test]
    fn invalid_config_rejected() {
        assert_eq!(GridConfig::new(336, 1), Err(GridError::SizeLimitTooSmall(1)));
        assert_eq!(GridConfig::new(0, 8), Err(GridError::ZeroGridSide));
        assert!(optimal_grid(0, 10, &GridConfig::default()).is_err());
    }

    #[test]
    fn objective_is_product_of_deltas() {
        let p = plan(1920, 1080, 8);
        assert_eq!(p.objective, p.delta_aspect * p.delta_pixel);
        assert_eq!(p.tiles.len() as u32, p.n_w * p.n_h);
    }
}
