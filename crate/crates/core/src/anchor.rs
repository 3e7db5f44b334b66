//! Anchor sets and desk-scale synthetic scenes.
//!
//! An anchor is a 3D location plus one row of attributes: a feature vector,
//! six scaling factors, and `3K` offset values. Real renderers decode nearby
//! primitives from these rows; here a fixed set of random full-rank linear
//! "views" stands in for rendering so reconstruction error and per-element
//! error sensitivity are both well-defined and cheap.

use crate::autodiff::{DiffError, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::subseed;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::path::Path;

pub const SCALING_DIM: usize = 6;

/// The three attribute column groups, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeGroup {
    Feature,
    Scaling,
    Offsets,
}

pub const GROUPS: [AttributeGroup; 3] = [
    AttributeGroup::Feature,
    AttributeGroup::Scaling,
    AttributeGroup::Offsets,
];

impl AttributeGroup {
    pub fn index(self) -> usize {
        match self {
            AttributeGroup::Feature => 0,
            AttributeGroup::Scaling => 1,
            AttributeGroup::Offsets => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AttributeGroup::Feature => "feature",
            AttributeGroup::Scaling => "scaling",
            AttributeGroup::Offsets => "offsets",
        }
    }
}

/// Column layout of an attribute row: `feature_dim + 6 + 3 * offset_count`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttributeLayout {
    pub feature_dim: usize,
    pub offset_count: usize,
}

impl AttributeLayout {
    pub fn new(feature_dim: usize, offset_count: usize) -> Result<Self> {
        if feature_dim == 0 || offset_count == 0 {
            return Err(Error::invalid("layout dimensions must be positive"));
        }
        Ok(AttributeLayout {
            feature_dim,
            offset_count,
        })
    }

    /// Total columns per anchor row.
    pub fn width(&self) -> usize {
        self.feature_dim + SCALING_DIM + 3 * self.offset_count
    }

    pub fn range(&self, group: AttributeGroup) -> std::ops::Range<usize> {
        match group {
            AttributeGroup::Feature => 0..self.feature_dim,
            AttributeGroup::Scaling => self.feature_dim..self.feature_dim + SCALING_DIM,
            AttributeGroup::Offsets => self.feature_dim + SCALING_DIM..self.width(),
        }
    }

    pub fn group_of(&self, col: usize) -> AttributeGroup {
        if col < self.feature_dim {
            AttributeGroup::Feature
        } else if col < self.feature_dim + SCALING_DIM {
            AttributeGroup::Scaling
        } else {
            AttributeGroup::Offsets
        }
    }
}

impl Default for AttributeLayout {
    fn default() -> Self {
        AttributeLayout {
            feature_dim: 8,
            offset_count: 2,
        }
    }
}

/// Axis-aligned world box; locations are quantized against it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if !(0..3).all(|i| max[i] > min[i] && min[i].is_finite() && max[i].is_finite()) {
            return Err(Error::invalid(format!(
                "bounds max must exceed min componentwise: {min:?} .. {max:?}"
            )));
        }
        Ok(SceneBounds { min, max })
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    /// Map a point into [0, 1]^3, clamping. Returns whether clamping fired.
    pub fn normalize(&self, p: &[f64]) -> ([f64; 3], bool) {
        let mut out = [0.0; 3];
        let mut clamped = false;
        for i in 0..3 {
            let t = (p[i] - self.min[i]) / self.extent(i);
            if !(0.0..=1.0).contains(&t) {
                clamped = true;
            }
            out[i] = t.clamp(0.0, 1.0);
        }
        (out, clamped)
    }
}

impl Default for SceneBounds {
    fn default() -> Self {
        SceneBounds {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

/// A scene: `n` locations and the matching attribute rows.
/// Immutable once built; share freely across threads.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    locations: Tensor,
    attributes: Tensor,
    layout: AttributeLayout,
    bounds: SceneBounds,
}

impl AnchorSet {
    pub fn new(
        locations: Tensor,
        attributes: Tensor,
        layout: AttributeLayout,
        bounds: SceneBounds,
    ) -> Result<Self> {
        let n = locations.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::invalid("anchor set must contain at least one anchor"));
        }
        if locations.shape() != [n, 3] {
            return Err(Error::invalid(format!(
                "locations must be [n, 3], got {:?}",
                locations.shape()
            )));
        }
        if attributes.shape() != [n, layout.width()] {
            return Err(Error::invalid(format!(
                "attributes must be [{n}, {}], got {:?}",
                layout.width(),
                attributes.shape()
            )));
        }
        for a in 0..n {
            if !bounds.contains(locations.row(a)) {
                return Err(Error::invalid(format!("anchor {a} outside scene bounds")));
            }
        }
        Ok(AnchorSet {
            locations,
            attributes,
            layout,
            bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires n >= 1
    }

    pub fn locations(&self) -> &Tensor {
        &self.locations
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn layout(&self) -> AttributeLayout {
        self.layout
    }

    pub fn bounds(&self) -> SceneBounds {
        self.bounds
    }

    /// Copy one attribute group into an `[n, group_width]` tensor.
    pub fn group_columns(&self, group: AttributeGroup) -> Tensor {
        group_columns_of(&self.attributes, self.layout, group)
    }
}

pub fn group_columns_of(attributes: &Tensor, layout: AttributeLayout, group: AttributeGroup) -> Tensor {
    let n = attributes.shape()[0];
    let r = layout.range(group);
    let mut data = Vec::with_capacity(n * r.len());
    for a in 0..n {
        data.extend_from_slice(&attributes.row(a)[r.clone()]);
    }
    Tensor::new(vec![n, r.len()], data).expect("group slice shape")
}

/// Reassemble full attribute rows from per-group matrices.
pub fn concat_groups(parts: &[Tensor; 3], layout: AttributeLayout) -> Tensor {
    let n = parts[0].shape()[0];
    let k = layout.width();
    let mut data = Vec::with_capacity(n * k);
    for a in 0..n {
        for part in parts {
            data.extend_from_slice(part.row(a));
        }
    }
    Tensor::new(vec![n, k], data).expect("concat shape")
}

/// Knobs for synthetic scene generation beyond the (seed, n, layout) core.
/// `field_frequency` controls how fast attribute means vary across space,
/// which is what makes two scenes structurally different.
#[derive(Clone, Copy, Debug)]
pub struct SceneStyle {
    pub bounds: SceneBounds,
    pub field_frequency: f64,
    /// (mean amplitude, noise std) per group.
    pub group_scales: [(f64, f64); 3],
}

impl Default for SceneStyle {
    fn default() -> Self {
        SceneStyle {
            bounds: SceneBounds::default(),
            field_frequency: 2.0,
            group_scales: [(2.0, 0.6), (0.3, 0.1), (0.2, 0.06)],
        }
    }
}

/// Deterministic synthetic scene: locations uniform in bounds, attributes a
/// smooth location field plus per-group Gaussian noise, so the column groups
/// have distinct scales and the rows are predictable from where they sit.
pub fn generate_synthetic_scene(seed: u64, n: usize, layout: AttributeLayout) -> Result<AnchorSet> {
    generate_scene(seed, n, layout, &SceneStyle::default())
}

pub fn generate_scene(
    seed: u64,
    n: usize,
    layout: AttributeLayout,
    style: &SceneStyle,
) -> Result<AnchorSet> {
    if n == 0 {
        return Err(Error::invalid("scene must contain at least one anchor"));
    }
    let k = layout.width();
    let bounds = style.bounds;

    let mut loc_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "scene.locations"));
    let mut locations = Vec::with_capacity(n * 3);
    for _ in 0..n {
        for axis in 0..3 {
            locations.push(loc_rng.gen_range(bounds.min[axis]..bounds.max[axis]));
        }
    }
    let locations = Tensor::new(vec![n, 3], locations)?;

    // Per-column direction and phase of the smooth field.
    let mut field_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "scene.field"));
    let mut waves = Vec::with_capacity(k);
    for _ in 0..k {
        let mut dir = [0.0f64; 3];
        let mut norm = 0.0;
        for d in &mut dir {
            let z: f64 = StandardNormal.sample(&mut field_rng);
            *d = z;
            norm += z * z;
        }
        let norm = norm.sqrt().max(1e-9);
        for d in &mut dir {
            *d *= style.field_frequency / norm;
        }
        let phase = field_rng.gen_range(0.0..std::f64::consts::TAU);
        waves.push((dir, phase));
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "scene.noise"));
    let mut attributes = Vec::with_capacity(n * k);
    for a in 0..n {
        let x = locations.row(a);
        for (j, (dir, phase)) in waves.iter().enumerate() {
            let (amp, sd) = style.group_scales[layout.group_of(j).index()];
            let carrier = (dir[0] * x[0] + dir[1] * x[1] + dir[2] * x[2] + phase).sin();
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            attributes.push(amp * carrier + sd * z);
        }
    }
    let attributes = Tensor::new(vec![n, k], attributes)?;
    AnchorSet::new(locations, attributes, layout, bounds)
}

/// Fixed bank of seeded full-rank linear views of the attribute rows.
///
/// Each view is `diag(r) * O` with `O` orthonormal and log-uniform row gains
/// `r`, so every view is invertible by construction and the per-column error
/// sensitivity genuinely varies.
#[derive(Clone, Debug)]
pub struct ToyViewModel {
    maps: Vec<Tensor>,
    seed: u64,
}

impl ToyViewModel {
    pub fn new(seed: u64, view_count: usize, width: usize) -> Self {
        let mut maps = Vec::with_capacity(view_count);
        for v in 0..view_count {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &format!("views.{v}")));
            let mut w = crate::nn::init_weight(&mut rng, width, width, crate::nn::InitScheme::Orthogonal);
            for j in 0..width {
                let gain = (rng.gen_range(0.4f64.ln()..2.5f64.ln())).exp();
                for c in 0..width {
                    let v = w.at(j, c) * gain;
                    w.set(j, c, v);
                }
            }
            maps.push(w);
        }
        ToyViewModel { maps, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn view_count(&self) -> usize {
        self.maps.len()
    }

    pub fn width(&self) -> usize {
        self.maps[0].shape()[0]
    }

    pub fn map(&self, view: usize) -> &Tensor {
        &self.maps[view]
    }

    /// Mean over views of the mean squared view-mapped difference. Zero iff
    /// the inputs are equal.
    pub fn distortion(&self, original: &Tensor, reconstructed: &Tensor) -> Result<f64> {
        if original.shape() != reconstructed.shape() {
            return Err(Error::invalid(format!(
                "distortion shapes differ: {:?} vs {:?}",
                original.shape(),
                reconstructed.shape()
            )));
        }
        let (n, k) = original.dims2();
        let mut total = 0.0;
        for map in &self.maps {
            let mut acc = 0.0;
            for a in 0..n {
                let orow = original.row(a);
                let rrow = reconstructed.row(a);
                for c in 0..k {
                    let mut y = 0.0;
                    for j in 0..k {
                        y += (orow[j] - rrow[j]) * map.at(j, c);
                    }
                    acc += y * y;
                }
            }
            total += acc / (n * k) as f64;
        }
        Ok(total / self.maps.len() as f64)
    }

    /// Same distortion, assembled on a tape against a reconstruction variable.
    pub fn distortion_on_tape(
        &self,
        tape: &mut Tape,
        original: Var,
        reconstructed: Var,
    ) -> std::result::Result<Var, DiffError> {
        let diff = tape.sub(reconstructed, original)?;
        let mut acc: Option<Var> = None;
        for map in &self.maps {
            let m = tape.leaf(map);
            let y = tape.matmul(diff, m)?;
            let sq = tape.mul(y, y)?;
            let mse = tape.mean(sq);
            acc = Some(match acc {
                None => mse,
                Some(prev) => tape.add(prev, mse)?,
            });
        }
        let total = acc.expect("at least one view");
        Ok(tape.affine(total, 1.0 / self.maps.len() as f64, 0.0))
    }

    /// Distortion restricted to a single view, on a tape.
    pub fn view_distortion_on_tape(
        &self,
        tape: &mut Tape,
        view: usize,
        original: Var,
        reconstructed: Var,
    ) -> std::result::Result<Var, DiffError> {
        let diff = tape.sub(reconstructed, original)?;
        let m = tape.leaf(&self.maps[view]);
        let y = tape.matmul(diff, m)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean(sq))
    }
}

// ---------------------------------------------------------------------------
// Scene files: "MSCS" magic, little-endian, f64 payload. See FORMAT.md.
// ---------------------------------------------------------------------------

const SCENE_MAGIC: &[u8; 4] = b"MSCS";
const SCENE_VERSION: u32 = 1;

pub fn write_scene(path: &Path, scene: &AnchorSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(scene.layout.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(scene.layout.offset_count as u32).to_le_bytes());
    for axis in 0..3 {
        buf.extend_from_slice(&scene.bounds.min[axis].to_le_bytes());
    }
    for axis in 0..3 {
        buf.extend_from_slice(&scene.bounds.max[axis].to_le_bytes());
    }
    for v in scene.locations.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in scene.attributes.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<AnchorSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_scene(&bytes)
}

pub fn parse_scene(bytes: &[u8]) -> Result<AnchorSet> {
    let mut r = crate::bytes::ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != SCENE_MAGIC {
        return Err(Error::corrupt("bad scene magic"));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCENE_VERSION,
        });
    }
    let n = r.u64()? as usize;
    let feature_dim = r.u32()? as usize;
    let offset_count = r.u32()? as usize;
    let layout = AttributeLayout::new(feature_dim, offset_count)?;
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for m in &mut min {
        *m = r.f64()?;
    }
    for m in &mut max {
        *m = r.f64()?;
    }
    let bounds = SceneBounds::new(min, max)?;
    let mut locations = Vec::with_capacity(n * 3);
    for _ in 0..n * 3 {
        locations.push(r.f64()?);
    }
    let k = layout.width();
    let mut attributes = Vec::with_capacity(n * k);
    for _ in 0..n * k {
        attributes.push(r.f64()?);
    }
    AnchorSet::new(
        Tensor::new(vec![n, 3], locations)?,
        Tensor::new(vec![n, k], attributes)?,
        layout,
        bounds,
    )
}
