//! Region-masking augmentation of a single annotated scan.
//!
//! Four strategies produce synthetic pairs `(X̃, Ỹ)` from `(X, Y)`:
//!
//! | strategy | mask `M`                                  | labels `Ỹ`     |
//! |----------|-------------------------------------------|----------------|
//! | RC1      | random box                                | `Y ⊙ (1 − M)`  |
//! | RC2      | random box                                | `Y`            |
//! | TC1      | union of a random non-empty tract subset  | `Y ⊙ (1 − M)`  |
//! | TC2      | union of a random non-empty tract subset  | `Y`            |
//!
//! and in every case `X̃ = X ⊙ (1 − M)`.
//!
//! Boxes: `λ ~ Beta(1, 1)`, origins `r_i ~ U(0, R_i)`, extents
//! `w_i = R_i √(1 − λ)`. A box covers voxel `v` iff
//! `⌊r_i⌋ ≤ v_i ≤ min(⌊r_i + w_i⌋, R_i − 1)` on every axis, and is empty
//! when any `w_i < 1`.
//!
//! Offline generation produces `min(2^N − 1, 100)` pairwise-distinct samples
//! per strategy. Sample `i` draws from its own generator seeded with
//! `mix(master_seed, strategy_id, i)`, so samples can be built in parallel.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::rng::{mix, rng_from};
use crate::volume::{
    content_hash_of, mask_union, voxelwise_mask_apply, BinaryMask3D, Geometry, TractLabelMap, Volume3D,
};

/// Hard cap on synthetic samples per strategy.
pub const MAX_SAMPLES_PER_STRATEGY: usize = 100;

/// Redraw attempts allowed per requested sample before giving up.
const RETRIES_PER_SAMPLE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "RC1")]
    Rc1,
    #[serde(rename = "RC2")]
    Rc2,
    #[serde(rename = "TC1")]
    Tc1,
    #[serde(rename = "TC2")]
    Tc2,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Rc1, Strategy::Rc2, Strategy::Tc1, Strategy::Tc2];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rc1 => "RC1",
            Strategy::Rc2 => "RC2",
            Strategy::Tc1 => "TC1",
            Strategy::Tc2 => "TC2",
        }
    }

    /// Seed-stream id.
    pub fn id(self) -> u64 {
        match self {
            Strategy::Rc1 => 1,
            Strategy::Rc2 => 2,
            Strategy::Tc1 => 3,
            Strategy::Tc2 => 4,
        }
    }

    /// Random box masks (RC*) rather than tract-subset masks (TC*).
    pub fn uses_box(self) -> bool {
        matches!(self, Strategy::Rc1 | Strategy::Rc2)
    }

    /// Labels are masked like the image (`*1`) rather than kept (`*2`).
    pub fn masks_labels(self) -> bool {
        matches!(self, Strategy::Rc1 | Strategy::Tc1)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RC1" => Ok(Strategy::Rc1),
            "RC2" => Ok(Strategy::Rc2),
            "TC1" => Ok(Strategy::Tc1),
            "TC2" => Ok(Strategy::Tc2),
            _ => Err(Error::Invalid(format!("unknown augmentation strategy {s:?}"))),
        }
    }
}

/// A sampled cutout box in continuous voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub lambda: f64,
}

impl BoxRegion {
    /// Box for a given `λ` and origin, with extents `R_i √(1 − λ)`.
    pub fn from_lambda(dims: [usize; 3], lambda: f64, origin: [f64; 3]) -> Self {
        let scale = (1.0 - lambda).max(0.0).sqrt();
        let extent = [0, 1, 2].map(|i| dims[i] as f64 * scale);
        Self {
            dims,
            origin,
            extent,
            lambda,
        }
    }

    /// Inclusive voxel range covered on `axis`, or `None` if empty.
    pub fn voxel_range(&self, axis: usize) -> Option<(usize, usize)> {
        let r = self.origin[axis];
        let w = self.extent[axis];
        if w < 1.0 {
            return None;
        }
        let lo = r.floor() as usize;
        let hi = ((r + w).floor() as usize).min(self.dims[axis] - 1);
        (lo <= hi).then_some((lo, hi))
    }

    /// Number of voxels the rasterized box covers.
    pub fn voxel_count(&self) -> usize {
        (0..3)
            .map(|a| self.voxel_range(a).map_or(0, |(lo, hi)| hi - lo + 1))
            .product()
    }
}

/// Non-empty subset of tract channels; `bits[j]` selects channel `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<bool>", into = "Vec<bool>")]
pub struct TractSubset {
    bits: Vec<bool>,
}

impl TryFrom<Vec<bool>> for TractSubset {
    type Error = Error;
    fn try_from(bits: Vec<bool>) -> Result<Self> {
        TractSubset::new(bits)
    }
}

impl From<TractSubset> for Vec<bool> {
    fn from(s: TractSubset) -> Self {
        s.bits
    }
}

impl TractSubset {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::Invalid("tract subset must select at least one tract".into()));
        }
        Ok(Self { bits })
    }

    /// Subset whose integer code is `code`, channel `j` being bit `j`.
    pub fn from_code(n_tracts: usize, code: u64) -> Result<Self> {
        if n_tracts < 64 && code >> n_tracts != 0 {
            return Err(Error::Invalid(format!("subset code {code} exceeds {n_tracts} tracts")));
        }
        Self::new((0..n_tracts).map(|j| code >> j & 1 == 1).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn code(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (j, &b)| acc | (b as u64) << j)
    }
}

/// How a sample's mask was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    Box(BoxRegion),
    Subset(TractSubset),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Volume3D,
    pub labels: TractLabelMap,
    pub strategy: Strategy,
    pub seed: u64,
    pub index: usize,
    pub provenance: MaskProvenance,
}

impl SyntheticSample {
    pub fn content_hash(&self) -> u64 {
        content_hash_of(&[&self.image, &self.labels])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub strategy: Strategy,
    pub count: usize,
    pub master_seed: u64,
}

/// `min(2^N − 1, 100)`.
pub fn sample_count(n_tracts: usize) -> usize {
    if n_tracts >= 7 {
        MAX_SAMPLES_PER_STRATEGY
    } else {
        ((1usize << n_tracts) - 1).min(MAX_SAMPLES_PER_STRATEGY)
    }
}

impl AugmentationPlan {
    pub fn new(strategy: Strategy, n_tracts: usize, master_seed: u64) -> Self {
        Self {
            strategy,
            count: sample_count(n_tracts),
            master_seed,
        }
    }

    pub fn for_labels(strategy: Strategy, labels: &TractLabelMap, master_seed: u64) -> Self {
        Self::new(strategy, labels.len(), master_seed)
    }

    /// Seed of sample `index`.
    pub fn sample_seed(&self, index: usize) -> u64 {
        mix(&[self.master_seed, self.strategy.id(), index as u64])
    }
}

/// `λ ~ Beta(1, 1)`, i.e. a uniform draw on `[0, 1)`.
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Draws `λ`, then `r_x`, `r_y`, `r_z`.
pub fn sample_box<R: Rng + ?Sized>(geometry: &Geometry, rng: &mut R) -> BoxRegion {
    let dims = geometry.dims();
    let lambda = sample_lambda(rng);
    let origin = [0, 1, 2].map(|i| {
        let r = rng.random::<f64>() * dims[i] as f64;
        // guard against rounding up to R_i
        r.min(dims[i] as f64 - f64::EPSILON * dims[i] as f64)
    });
    BoxRegion::from_lambda(dims, lambda, origin)
}

pub fn box_to_mask(region: &BoxRegion, geometry: &Geometry) -> Result<BinaryMask3D> {
    if region.dims != geometry.dims() {
        return Err(Error::GeometryMismatch {
            left: format!("box sampled for {:?}", region.dims),
            right: geometry.describe(),
        });
    }
    let mut mask = BinaryMask3D::empty(geometry.clone());
    let ranges = [0, 1, 2].map(|a| region.voxel_range(a));
    if let [Some((x0, x1)), Some((y0, y1)), Some((z0, z1))] = ranges {
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    mask.set(x, y, z, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Draws `a^j ~ Bernoulli(0.5)` in channel order, redrawing the whole vector
/// while it is all zero.
pub fn sample_tract_subset<R: Rng + ?Sized>(n_tracts: usize, rng: &mut R) -> TractSubset {
    assert!(n_tracts >= 1, "need at least one tract");
    loop {
        let bits: Vec<bool> = (0..n_tracts).map(|_| rng.random_bool(0.5)).collect();
        if let Ok(s) = TractSubset::new(bits) {
            return s;
        }
    }
}

/// Union of the selected channels.
pub fn subset_to_mask(labels: &TractLabelMap, subset: &TractSubset) -> Result<BinaryMask3D> {
    if subset.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "subset has {} bits but label map has {} channels",
            subset.len(),
            labels.len()
        )));
    }
    mask_union(
        labels
            .channels()
            .iter()
            .zip(subset.bits())
            .filter(|(_, &b)| b)
            .map(|(c, _)| &c.mask),
    )
}

/// `Y ⊙ (1 − M)` on every channel for RC1/TC1; `Y` unchanged for RC2/TC2.
pub fn derive_labels(y: &TractLabelMap, m: &BinaryMask3D, strategy: Strategy) -> Result<TractLabelMap> {
    y.geometry().ensure_same(m.geometry())?;
    if strategy.masks_labels() {
        Ok(y.map_masks(|c| c.minus(m).expect("geometry checked")))
    } else {
        Ok(y.clone())
    }
}

/// Builds one synthetic pair from a mask.
pub fn apply_cutout(
    x: &Volume3D,
    y: &TractLabelMap,
    mask: &BinaryMask3D,
    strategy: Strategy,
) -> Result<(Volume3D, TractLabelMap)> {
    Ok((voxelwise_mask_apply(x, mask)?, derive_labels(y, mask, strategy)?))
}

/// Offline generation of `plan.count` distinct synthetic samples.
///
/// TC strategies with `2^N − 1 ≤ 100` enumerate every non-empty subset in
/// ascending code order; larger N draws subsets without replacement. RC
/// strategies redraw a box whenever it reproduces the source or an earlier
/// sample. Output is in index order and does not depend on thread count.
pub fn generate_dataset(x: &Volume3D, y: &TractLabelMap, plan: &AugmentationPlan) -> Result<Vec<SyntheticSample>> {
    x.geometry().ensure_same(y.geometry())?;
    if plan.count == 0 {
        return Err(Error::Invalid("augmentation plan count must be >= 1".into()));
    }
    let n = y.len();
    let source_hash = content_hash_of(&[x, y]);
    let budget = plan.count * RETRIES_PER_SAMPLE;
    let fail = |produced: usize, attempts: usize| Error::DuplicateBudget {
        strategy: plan.strategy.to_string(),
        requested: plan.count,
        produced,
        attempts,
    };

    if plan.strategy.uses_box() {
        let build = |index: usize, attempt: usize| -> Result<SyntheticSample> {
            let seed = if attempt == 0 {
                plan.sample_seed(index)
            } else {
                mix(&[plan.sample_seed(index), attempt as u64])
            };
            let mut rng = rng_from(seed);
            let region = sample_box(x.geometry(), &mut rng);
            let mask = box_to_mask(&region, x.geometry())?;
            let (image, labels) = apply_cutout(x, y, &mask, plan.strategy)?;
            Ok(SyntheticSample {
                image,
                labels,
                strategy: plan.strategy,
                seed,
                index,
                provenance: MaskProvenance::Box(region),
            })
        };
        let indices: Vec<usize> = (0..plan.count).collect();
        let first: Vec<SyntheticSample> = par_map(&indices, |&i| build(i, 0)).into_iter().collect::<Result<_>>()?;
        let mut seen = HashSet::from([source_hash]);
        let mut out = Vec::with_capacity(plan.count);
        let mut attempts = plan.count;
        for mut sample in first {
            let mut attempt = 0;
            while !seen.insert(sample.content_hash()) {
                attempt += 1;
                attempts += 1;
                if attempts > budget {
                    return Err(fail(out.len(), attempts));
                }
                sample = build(sample.index, attempt)?;
            }
            out.push(sample);
        }
        return Ok(out);
    }

    let total_subsets: u128 = (1u128 << n.min(127)) - 1;
    if plan.count as u128 > total_subsets {
        return Err(fail(0, 0));
    }
    let subsets: Vec<(u64, TractSubset)> = if total_subsets <= MAX_SAMPLES_PER_STRATEGY as u128 {
        (1..=plan.count as u64)
            .map(|code| Ok((plan.sample_seed(code as usize - 1), TractSubset::from_code(n, code)?)))
            .collect::<Result<_>>()?
    } else {
        let mut used = HashSet::new();
        let mut draws = 0usize;
        (0..plan.count)
            .map(|index| {
                let seed = plan.sample_seed(index);
                let mut rng = rng_from(seed);
                loop {
                    draws += 1;
                    if draws > budget {
                        return Err(fail(index, draws));
                    }
                    let s = sample_tract_subset(n, &mut rng);
                    if used.insert(s.clone()) {
                        return Ok((seed, s));
                    }
                }
            })
            .collect::<Result<_>>()?
    };

    let indexed: Vec<(usize, (u64, TractSubset))> = subsets.into_iter().enumerate().collect();
    let samples: Vec<SyntheticSample> = par_map(&indexed, |(index, (seed, subset))| {
        let mask = subset_to_mask(y, subset)?;
        let (image, labels) = apply_cutout(x, y, &mask, plan.strategy)?;
        Ok(SyntheticSample {
            image,
            labels,
            strategy: plan.strategy,
            seed: *seed,
            index: *index,
            provenance: MaskProvenance::Subset(subset.clone()),
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut seen = HashSet::from([source_hash]);
    for (produced, s) in samples.iter().enumerate() {
        if !seen.insert(s.content_hash()) {
            return Err(fail(produced, samples.len()));
        }
    }
    Ok(samples)
}
