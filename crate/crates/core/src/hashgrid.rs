//! Multi-resolution hash-grid feature field.
//!
//! Each level hashes the corners of a virtual dense grid into a fixed table
//! of learnable feature rows; a query trilinearly blends the 8 surrounding
//! corners and levels are concatenated. Collisions are accepted silently.

use crate::anchor::SceneBounds;
use crate::autodiff::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicU64, Ordering};

/// Spatial hash primes (Instant-NGP convention).
const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridConfig {
    pub features: usize,
    pub table_size: usize,
    pub resolutions: Vec<usize>,
}

impl GridConfig {
    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    /// Width of the concatenated feature vector.
    pub fn output_width(&self) -> usize {
        self.levels() * self.features
    }

    pub fn validate(&self) -> Result<()> {
        if !self.table_size.is_power_of_two() {
            return Err(Error::invalid(format!(
                "hash table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.resolutions.is_empty() || self.features == 0 {
            return Err(Error::invalid("grid needs at least one level and one feature"));
        }
        if !self.resolutions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(format!(
                "grid resolutions must strictly increase: {:?}",
                self.resolutions
            )));
        }
        Ok(())
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            features: 4,
            table_size: 1 << 14,
            resolutions: vec![8, 16, 32, 64],
        }
    }
}

/// The field itself: one learnable table per level plus query bookkeeping.
#[derive(Debug)]
pub struct HashGrid {
    cfg: GridConfig,
    tables: Vec<ParamId>,
    clamped_queries: AtomicU64,
}

impl Clone for HashGrid {
    fn clone(&self) -> Self {
        HashGrid {
            cfg: self.cfg.clone(),
            tables: self.tables.clone(),
            clamped_queries: AtomicU64::new(self.clamped_queries.load(Ordering::Relaxed)),
        }
    }
}

fn hash_corner(x: u64, y: u64, z: u64, table_size: usize) -> usize {
    let h = x
        .wrapping_mul(HASH_PRIMES[0])
        ^ y.wrapping_mul(HASH_PRIMES[1])
        ^ z.wrapping_mul(HASH_PRIMES[2]);
    (h & (table_size as u64 - 1)) as usize
}

/// Precomputed gather indices and trilinear weights for one batch of queries.
pub struct CornerPlan {
    levels: Vec<LevelPlan>,
    clamped: usize,
}

struct LevelPlan {
    indices: [Vec<usize>; 8],
    weights: [Tensor; 8],
}

impl CornerPlan {
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Trilinear weights of one query at one level (test hook: they must
    /// always sum to one).
    pub fn weights_of(&self, level: usize, row: usize) -> [f64; 8] {
        let mut out = [0.0; 8];
        for c in 0..8 {
            out[c] = self.levels[level].weights[c].data()[row];
        }
        out
    }
}

impl HashGrid {
    pub fn register(store: &mut ParamStore, cfg: GridConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tables = Vec::with_capacity(cfg.levels());
        for level in 0..cfg.levels() {
            let n = cfg.table_size * cfg.features;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e-2..1e-2)).collect();
            let t = Tensor::new(vec![cfg.table_size, cfg.features], data).expect("table shape");
            tables.push(store.register(&format!("grid.level{level}"), t));
        }
        Ok(HashGrid {
            cfg,
            tables,
            clamped_queries: AtomicU64::new(0),
        })
    }

    /// Rebuild from existing parameters (decoder side).
    pub fn from_parts(cfg: GridConfig, tables: Vec<ParamId>) -> Result<Self> {
        cfg.validate()?;
        if tables.len() != cfg.levels() {
            return Err(Error::invalid("table count does not match grid levels"));
        }
        Ok(HashGrid {
            cfg,
            tables,
            clamped_queries: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }

    /// Total clamped queries recorded so far.
    pub fn clamped_queries(&self) -> u64 {
        self.clamped_queries.load(Ordering::Relaxed)
    }

    /// Resolve gather indices and trilinear weights for a batch of locations.
    /// Out-of-bounds queries are clamped onto the box and counted.
    pub fn plan(&self, bounds: &SceneBounds, locations: &Tensor) -> CornerPlan {
        let n = locations.shape()[0];
        let mut clamped = 0usize;
        let mut levels = Vec::with_capacity(self.cfg.levels());
        for &res in &self.cfg.resolutions {
            let mut indices: [Vec<usize>; 8] = Default::default();
            let mut weights: [Vec<f64>; 8] = Default::default();
            for c in 0..8 {
                indices[c] = Vec::with_capacity(n);
                weights[c] = Vec::with_capacity(n);
            }
            for a in 0..n {
                let (norm, was_clamped) = bounds.normalize(locations.row(a));
                if was_clamped {
                    clamped += 1;
                }
                let mut cell = [0u64; 3];
                let mut frac = [0.0f64; 3];
                for axis in 0..3 {
                    let pos = norm[axis] * res as f64;
                    let base = pos.floor().min(res as f64 - 1.0).max(0.0);
                    cell[axis] = base as u64;
                    frac[axis] = pos - base;
                }
                for (c, (ix, wt)) in indices.iter_mut().zip(weights.iter_mut()).enumerate() {
                    let dx = (c & 1) as u64;
                    let dy = ((c >> 1) & 1) as u64;
                    let dz = ((c >> 2) & 1) as u64;
                    let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                    ix.push(hash_corner(
                        cell[0] + dx,
                        cell[1] + dy,
                        cell[2] + dz,
                        self.cfg.table_size,
                    ));
                    wt.push(w);
                }
            }
            levels.push(LevelPlan {
                indices,
                weights: weights.map(|w| Tensor::new(vec![n, 1], w).expect("weight shape")),
            });
        }
        // clamped is counted per (query, level); normalize to per query
        let per_query = clamped / self.cfg.levels();
        self.clamped_queries
            .fetch_add(per_query as u64, Ordering::Relaxed);
        CornerPlan {
            levels,
            clamped: per_query,
        }
    }

    /// Differentiable interpolation of a planned batch: `[n, levels * features]`.
    pub fn interpolate_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        plan: &CornerPlan,
    ) -> std::result::Result<Var, DiffError> {
        let mut parts = Vec::with_capacity(self.cfg.levels());
        for (level, lp) in plan.levels.iter().enumerate() {
            let table = tape.param(store, self.tables[level]);
            let mut acc: Option<Var> = None;
            for c in 0..8 {
                let rows = tape.gather(table, &lp.indices[c])?;
                let w = tape.leaf(&lp.weights[c]);
                let scaled = tape.scale_rows(rows, w)?;
                acc = Some(match acc {
                    None => scaled,
                    Some(prev) => tape.add(prev, scaled)?,
                });
            }
            parts.push(acc.expect("eight corners"));
        }
        tape.concat_cols(&parts)
    }

    /// Convenience: plan + interpolate for one location, returning the
    /// concatenated feature vector and whether the query was clamped.
    pub fn features_at(
        &self,
        store: &ParamStore,
        bounds: &SceneBounds,
        location: [f64; 3],
    ) -> (Vec<f64>, bool) {
        let loc = Tensor::matrix(1, 3, location.to_vec()).expect("location shape");
        let plan = self.plan(bounds, &loc);
        let mut tape = Tape::new();
        let out = self
            .interpolate_on_tape(&mut tape, store, &plan)
            .expect("interpolation on a valid plan");
        (tape.value(out).data().to_vec(), plan.clamped > 0)
    }

    /// Table entry behind a given corner of a level's virtual grid.
    pub fn corner_entry(&self, store: &ParamStore, level: usize, corner: [u64; 3]) -> Vec<f64> {
        let ix = hash_corner(corner[0], corner[1], corner[2], self.cfg.table_size);
        store.value(self.tables[level]).row(ix).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{param_gradient_check, probe_largest, ParamProbe};
    use rand_chacha::rand_core::SeedableRng;

    fn small_grid(store: &mut ParamStore) -> HashGrid {
        let cfg = GridConfig {
            features: 2,
            table_size: 1 << 8,
            resolutions: vec![4, 8],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        HashGrid::register(store, cfg, &mut rng).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(GridConfig {
            features: 2,
            table_size: 100,
            resolutions: vec![4, 8],
        }
        .validate()
        .is_err());
        assert!(GridConfig {
            features: 2,
            table_size: 64,
            resolutions: vec![8, 8],
        }
        .validate()
        .is_err());
        assert!(GridConfig::default().validate().is_ok());
    }

    #[test]
    fn query_at_cell_corner_returns_stored_feature() {
        let mut store = ParamStore::new();
        let grid = small_grid(&mut store);
        let bounds = SceneBounds::default();
        // corner (1, 2, 3) of the level-0 grid (resolution 4) in world coords
        let world = [
            bounds.min[0] + bounds.extent(0) * (1.0 / 4.0),
            bounds.min[1] + bounds.extent(1) * (2.0 / 4.0),
            bounds.min[2] + bounds.extent(2) * (3.0 / 4.0),
        ];
        let (features, clamped) = grid.features_at(&store, &bounds, world);
        assert!(!clamped);
        let expect = grid.corner_entry(&store, 0, [1, 2, 3]);
        for (got, want) in features[0..2].iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_midpoint_averages_endpoints() {
        let mut store = ParamStore::new();
        let grid = small_grid(&mut store);
        let bounds = SceneBounds::default();
        // midpoint of the x-edge between corners (1,2,3) and (2,2,3), level 0
        let world = [
            bounds.min[0] + bounds.extent(0) * (1.5 / 4.0),
            bounds.min[1] + bounds.extent(1) * (2.0 / 4.0),
            bounds.min[2] + bounds.extent(2) * (3.0 / 4.0),
        ];
        let (features, _) = grid.features_at(&store, &bounds, world);
        let a = grid.corner_entry(&store, 0, [1, 2, 3]);
        let b = grid.corner_entry(&store, 0, [2, 2, 3]);
        for j in 0..2 {
            let want = 0.5 * (a[j] + b[j]);
            assert!((features[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_weights_partition_unity() {
        let mut store = ParamStore::new();
        let grid = small_grid(&mut store);
        let bounds = SceneBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 64;
        let mut locs = Vec::new();
        for _ in 0..n {
            for axis in 0..3 {
                locs.push(rng.gen_range(bounds.min[axis]..bounds.max[axis]));
            }
        }
        let plan = grid.plan(&bounds, &Tensor::new(vec![n, 3], locs).unwrap());
        for level in 0..2 {
            for row in 0..n {
                let sum: f64 = plan.weights_of(level, row).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "level {level} row {row}: {sum}");
            }
        }
    }

    #[test]
    fn interpolation_is_continuous() {
        let mut store = ParamStore::new();
        let grid = small_grid(&mut store);
        let bounds = SceneBounds::default();
        let max_feat = 1e-2;
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = [
                rng.gen_range(-0.99..0.99),
                rng.gen_range(-0.99..0.99),
                rng.gen_range(-0.99..0.99),
            ];
            let q = [p[0] + eps, p[1], p[2]];
            let (fp, _) = grid.features_at(&store, &bounds, p);
            let (fq, _) = grid.features_at(&store, &bounds, q);
            for level in 0..2 {
                let res = grid.config().resolutions[level] as f64;
                // Lipschitz bound for trilinear blending along one axis
                let bound = 8.0 * max_feat * res * (eps / bounds.extent(0)) + 1e-15;
                for j in 0..2 {
                    let d = (fp[level * 2 + j] - fq[level * 2 + j]).abs();
                    assert!(d <= bound, "level {level}: {d} > {bound}");
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_clamps_and_counts() {
        let mut store = ParamStore::new();
        let grid = small_grid(&mut store);
        let bounds = SceneBounds::default();
        let (outside, clamped) = grid.features_at(&store, &bounds, [2.0, 0.0, 0.0]);
        assert!(clamped);
        let (corner, _) = grid.features_at(&store, &bounds, [1.0, 0.0, 0.0]);
        assert_eq!(outside, corner);
        assert_eq!(grid.clamped_queries(), 1);
    }

    #[test]
    fn table_gradients_pass_finite_differences() {
        let mut store = ParamStore::new();
        let grid = small_grid(&mut store);
        let bounds = SceneBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let mut locs = Vec::new();
        for _ in 0..n * 3 {
            locs.push(rng.gen_range(-0.9..0.9));
        }
        let locations = Tensor::new(vec![n, 3], locs).unwrap();
        let plan = grid.plan(&bounds, &locations);

        let forward = |s: &ParamStore, tape: &mut Tape| {
            let feats = grid.interpolate_on_tape(tape, s, &plan)?;
            let act = tape.tanh(feats);
            Ok(tape.sum(act))
        };

        // analytic gradients once, to pick well-conditioned probe entries
        let mut tape = Tape::new();
        let out = forward(&store, &mut tape).unwrap();
        let grads = tape.backward(out).unwrap();
        let probes: Vec<ParamProbe> = grid
            .tables()
            .iter()
            .map(|&id| ParamProbe {
                id,
                elements: probe_largest(grads.param(id).unwrap(), 12),
            })
            .collect();

        let err = param_gradient_check(&store, forward, &probes, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

}
