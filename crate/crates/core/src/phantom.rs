//! Synthetic tract phantoms.
//!
//! A phantom population is defined by a [`PhantomSpec`]: its seed fixes a
//! template "anatomy" (one smooth tube per tract, left/right tracts mirrored
//! across the mid-sagittal plane), and each subject perturbs the template's
//! control points with its own seed. Existing and novel tracts come from the
//! same generator. Image intensity is a constant background plus one bump per
//! covering tract, scaled by a per-subject gain, plus Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::rng::{child_rng, mix, rng_from, Rng64};
use crate::volume::{BinaryMask3D, Geometry, TractChannel, TractLabelMap, Volume3D};

const NOVEL_NAMES: [&str; 6] = ["CST", "OR", "FPT", "POPT", "ILF", "UF"];
const EXISTING_NAMES: [&str; 8] = ["AF", "ATR", "CG", "IFO", "SLF_I", "SLF_II", "STR", "T_PREM"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub n_existing_tracts: usize,
    pub n_novel_tracts: usize,
    /// Tube radius range in voxels.
    pub radius_range: [f64; 2],
    /// Bézier control points per tract (>= 2).
    pub control_points: usize,
    /// Per-coordinate standard deviation of subject control-point jitter (voxels).
    pub jitter: f64,
    pub background: f32,
    /// Range tract intensity bumps are drawn from.
    pub bump_range: [f32; 2],
    /// Subject gain is drawn from `1 ± gain_jitter`.
    pub gain_jitter: f32,
    /// Noise standard deviation (bump heights are O(1)).
    pub noise_sigma: f32,
    /// Population (template) seed.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [48; 3],
            spacing: [2.5; 3],
            n_existing_tracts: 6,
            n_novel_tracts: 4,
            radius_range: [1.5, 2.5],
            control_points: 4,
            jitter: 1.5,
            background: 0.2,
            bump_range: [0.4, 1.0],
            gain_jitter: 0.1,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub subject_id: String,
    pub image: Volume3D,
    pub existing: TractLabelMap,
    pub novel: TractLabelMap,
}

/// One tract of the population template.
#[derive(Debug, Clone, PartialEq)]
struct TractTemplate {
    name: String,
    control: Vec<[f64; 3]>,
    radius: f64,
    bump: f32,
    novel: bool,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_existing_tracts == 0 || self.n_novel_tracts == 0 {
            return Err(Error::Invalid("phantom needs >= 1 existing and >= 1 novel tract".into()));
        }
        let [rmin, rmax] = self.radius_range;
        if !(rmin >= 1.0 && rmax >= rmin) {
            return Err(Error::Invalid(format!("radius range {:?} must satisfy 1 <= min <= max", self.radius_range)));
        }
        if self.control_points < 2 {
            return Err(Error::Invalid("need at least two control points".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.jitter >= 0.0 && (0.0..1.0).contains(&self.gain_jitter)) {
            return Err(Error::Invalid("noise, jitter must be >= 0 and gain_jitter in [0, 1)".into()));
        }
        if !(self.bump_range[0] > 0.0 && self.bump_range[1] >= self.bump_range[0]) {
            return Err(Error::Invalid(format!("bad bump range {:?}", self.bump_range)));
        }
        let margin = self.margin();
        if self.dims.iter().any(|&d| (d as f64) < 2.0 * margin + 4.0) {
            return Err(Error::Invalid(format!(
                "volume {:?} cannot hold tubes of radius {rmax} (needs >= {} voxels per axis)",
                self.dims,
                (2.0 * margin + 4.0).ceil()
            )));
        }
        Geometry::new(self.dims, self.spacing)?;
        Ok(())
    }

    fn margin(&self) -> f64 {
        self.radius_range[1] + 1.0
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.dims, self.spacing).expect("validated spec")
    }

    pub fn existing_names(&self) -> Vec<String> {
        tract_names(&EXISTING_NAMES, self.n_existing_tracts, "EX")
    }

    pub fn novel_names(&self) -> Vec<String> {
        tract_names(&NOVEL_NAMES, self.n_novel_tracts, "NT")
    }

    fn templates(&self) -> Vec<TractTemplate> {
        let mut rng = child_rng(self.seed, "phantom-template", 0);
        let mut out = Vec::new();
        for (novel, names) in [(false, self.existing_names()), (true, self.novel_names())] {
            let mut i = 0;
            while i < names.len() {
                let paired = i + 1 < names.len();
                let bump = rng.random_range(self.bump_range[0]..=self.bump_range[1]);
                let radius = rng.random_range(self.radius_range[0]..=self.radius_range[1]);
                let control = self.template_curve(&mut rng, paired);
                if paired {
                    let mirrored = control
                        .iter()
                        .map(|p| [self.dims[0] as f64 - 1.0 - p[0], p[1], p[2]])
                        .collect();
                    out.push(TractTemplate {
                        name: names[i].clone(),
                        control,
                        radius,
                        bump,
                        novel,
                    });
                    out.push(TractTemplate {
                        name: names[i + 1].clone(),
                        control: mirrored,
                        radius,
                        bump,
                        novel,
                    });
                    i += 2;
                } else {
                    out.push(TractTemplate {
                        name: names[i].clone(),
                        control,
                        radius,
                        bump,
                        novel,
                    });
                    i += 1;
                }
            }
        }
        out
    }

    /// Control points running between opposite faces along a random main
    /// axis. Lateral (paired) tracts stay in the low-x hemisphere.
    fn template_curve(&self, rng: &mut Rng64, lateral: bool) -> Vec<[f64; 3]> {
        let m = self.margin();
        let hi = |axis: usize| self.dims[axis] as f64 - 1.0 - m;
        let main = rng.random_range(0..3usize);
        let x_range = if lateral {
            (m, (self.dims[0] as f64 / 2.0 - 2.0).max(m + 0.5))
        } else {
            (self.dims[0] as f64 / 2.0 - 3.0, self.dims[0] as f64 / 2.0 + 2.0)
        };
        let n = self.control_points;
        (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64;
                let mut p = [0.0; 3];
                for (axis, v) in p.iter_mut().enumerate() {
                    let (lo, up) = if axis == 0 { x_range } else { (m, hi(axis)) };
                    *v = if axis == main {
                        lo + t * (up - lo)
                    } else {
                        rng.random_range(lo..=up)
                    };
                }
                p
            })
            .collect()
    }
}

fn tract_names(bases: &[&str], n: usize, fallback: &str) -> Vec<String> {
    let base = |k: usize| {
        bases
            .get(k)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("{fallback}{}", k + 1))
    };
    let mut names = Vec::with_capacity(n);
    for k in 0..n / 2 {
        names.push(format!("{}_left", base(k)));
        names.push(format!("{}_right", base(k)));
    }
    if n % 2 == 1 {
        names.push(base(n / 2));
    }
    names
}

#[allow(clippy::needless_range_loop)]
fn bezier(control: &[[f64; 3]], t: f64) -> [f64; 3] {
    let mut pts = control.to_vec();
    for level in 1..pts.len() {
        for i in 0..pts.len() - level {
            for a in 0..3 {
                pts[i][a] = (1.0 - t) * pts[i][a] + t * pts[i + 1][a];
            }
        }
    }
    pts[0]
}

/// Marks every voxel within `radius` of the Bézier curve.
fn rasterize_tube(geometry: &Geometry, control: &[[f64; 3]], radius: f64) -> BinaryMask3D {
    let dims = geometry.dims();
    let mut mask = BinaryMask3D::empty(geometry.clone());
    let length: f64 = control
        .windows(2)
        .map(|w| (0..3).map(|a| (w[1][a] - w[0][a]).powi(2)).sum::<f64>().sqrt())
        .sum();
    let steps = ((length / 0.25).ceil() as usize).max(2);
    let r2 = radius * radius;
    for s in 0..=steps {
        let c = bezier(control, s as f64 / steps as f64);
        let lo = c.map(|v| (v - radius).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((c[a] + radius).ceil().max(0.0) as usize).min(dims[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                    if d2 <= r2 {
                        mask.set(x, y, z, true);
                    }
                }
            }
        }
    }
    mask
}

/// Generates one subject. Deterministic per `(spec, subject_seed)`.
pub fn generate_phantom(spec: &PhantomSpec, subject_seed: u64) -> Result<PhantomSample> {
    spec.validate()?;
    let geometry = spec.geometry();
    let mut rng = rng_from(mix(&[spec.seed, subject_seed]));
    let m = spec.margin();
    let jitter = Normal::new(0.0, spec.jitter).expect("jitter >= 0");

    let mut existing = Vec::new();
    let mut novel = Vec::new();
    let mut intensity = vec![spec.background; geometry.len()];
    for t in spec.templates() {
        let control: Vec<[f64; 3]> = t
            .control
            .iter()
            .map(|p| {
                let mut q = *p;
                for (a, v) in q.iter_mut().enumerate() {
                    *v = (*v + jitter.sample(&mut rng)).clamp(m, spec.dims[a] as f64 - 1.0 - m);
                }
                q
            })
            .collect();
        let mask = rasterize_tube(&geometry, &control, t.radius);
        if mask.is_empty() {
            return Err(Error::Invalid(format!("tract {} does not intersect the volume", t.name)));
        }
        for (v, &inside) in intensity.iter_mut().zip(mask.data()) {
            if inside {
                *v += t.bump;
            }
        }
        let channel = TractChannel { name: t.name, mask };
        if t.novel {
            novel.push(channel);
        } else {
            existing.push(channel);
        }
    }

    let gain = 1.0 + spec.gain_jitter * (2.0 * rng.random::<f32>() - 1.0);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma).expect("sigma >= 0");
        for v in &mut intensity {
            *v = *v * gain + noise.sample(&mut rng);
        }
    } else {
        for v in &mut intensity {
            *v *= gain;
        }
    }

    Ok(PhantomSample {
        subject_id: format!("subject-{subject_seed:016x}"),
        image: Volume3D::from_vec(geometry, intensity)?,
        existing: TractLabelMap::new(existing)?,
        novel: TractLabelMap::new(novel)?,
    })
}

/// Pretraining subjects (existing-tract labels), the single annotated
/// subject, and test subjects (novel-tract labels).
#[derive(Debug, Clone)]
pub struct PhantomSplits {
    pub pretrain: Vec<PhantomSample>,
    pub one_shot: PhantomSample,
    pub test: Vec<PhantomSample>,
}

impl PhantomSplits {
    pub fn all_subject_ids(&self) -> Vec<&str> {
        self.pretrain
            .iter()
            .chain(std::iter::once(&self.one_shot))
            .chain(&self.test)
            .map(|s| s.subject_id.as_str())
            .collect()
    }
}

/// Subject seeds are `mix(seed, role, i)`; roles are disjoint streams and any
/// accidental seed collision is resolved by re-mixing.
pub fn generate_splits(spec: &PhantomSpec, n_pretrain: usize, n_test: usize, seed: u64) -> Result<PhantomSplits> {
    if n_pretrain == 0 || n_test == 0 {
        return Err(Error::Invalid("n_pretrain and n_test must be >= 1".into()));
    }
    spec.validate()?;
    let mut used = std::collections::HashSet::new();
    let mut draw = |role: u64, i: usize| {
        let mut s = mix(&[seed, role, i as u64]);
        while !used.insert(s) {
            s = mix(&[s]);
        }
        s
    };
    let pretrain_seeds: Vec<u64> = (0..n_pretrain).map(|i| draw(1, i)).collect();
    let one_shot_seed = draw(2, 0);
    let test_seeds: Vec<u64> = (0..n_test).map(|i| draw(3, i)).collect();

    let build = |seeds: &[u64]| -> Result<Vec<PhantomSample>> {
        par_map(seeds, |&s| generate_phantom(spec, s)).into_iter().collect()
    };
    Ok(PhantomSplits {
        pretrain: build(&pretrain_seeds)?,
        one_shot: generate_phantom(spec, one_shot_seed)?,
        test: build(&test_seeds)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashSet, VecDeque};

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: [24; 3],
            ..PhantomSpec::default()
        }
    }

    fn six_connected_components(m: &BinaryMask3D) -> usize {
        let g = m.geometry();
        let [nx, ny, nz] = g.dims();
        let mut seen = vec![false; g.len()];
        let mut components = 0;
        for start in 0..g.len() {
            if !m.data()[start] || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                let [x, y, z] = g.coords(i);
                let mut push = |x: usize, y: usize, z: usize| {
                    let j = g.index(x, y, z);
                    if m.data()[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    push(x - 1, y, z);
                }
                if x + 1 < nx {
                    push(x + 1, y, z);
                }
                if y > 0 {
                    push(x, y - 1, z);
                }
                if y + 1 < ny {
                    push(x, y + 1, z);
                }
                if z > 0 {
                    push(x, y, z - 1);
                }
                if z + 1 < nz {
                    push(x, y, z + 1);
                }
            }
        }
        components
    }

    #[test]
    fn noiseless_single_pair_has_two_levels() {
        let spec = PhantomSpec {
            n_existing_tracts: 1,
            n_novel_tracts: 1,
            noise_sigma: 0.0,
            gain_jitter: 0.0,
            ..small()
        };
        let s = generate_phantom(&spec, 4).unwrap();
        let tmpl = spec.templates();
        let (e, n) = (s.existing.mask(0), s.novel.mask(0));
        for i in 0..s.image.data().len() {
            let expected = spec.background
                + if e.data()[i] { tmpl[0].bump } else { 0.0 }
                + if n.data()[i] { tmpl[1].bump } else { 0.0 };
            assert_eq!(s.image.data()[i], expected);
        }
        let outside = (0..s.image.data().len()).find(|&i| !e.data()[i] && !n.data()[i]).unwrap();
        assert_eq!(s.image.data()[outside], spec.background);
    }

    #[test]
    fn deterministic_and_subject_specific() {
        let spec = small();
        let a = generate_phantom(&spec, 9).unwrap();
        assert_eq!(a, generate_phantom(&spec, 9).unwrap());
        let b = generate_phantom(&spec, 10).unwrap();
        assert_ne!(a.image, b.image);
        assert_ne!(a.novel, b.novel);
    }

    #[test]
    fn channel_counts_and_connectivity() {
        let spec = PhantomSpec {
            dims: [32; 3],
            ..PhantomSpec::default()
        };
        let s = generate_phantom(&spec, 1).unwrap();
        assert_eq!(s.novel.len(), 4);
        assert_eq!(s.existing.len(), 6);
        assert_eq!(
            s.novel.names().collect::<Vec<_>>(),
            ["CST_left", "CST_right", "OR_left", "OR_right"]
        );
        for c in s.novel.channels().iter().chain(s.existing.channels()) {
            assert!(!c.mask.is_empty(), "{} empty", c.name);
            assert_eq!(six_connected_components(&c.mask), 1, "{} fragmented", c.name);
        }
    }

    #[test]
    fn odd_counts_get_midline_tract() {
        let spec = PhantomSpec {
            n_novel_tracts: 3,
            ..small()
        };
        assert_eq!(spec.novel_names(), ["CST_left", "CST_right", "OR"]);
        assert_eq!(generate_phantom(&spec, 0).unwrap().novel.len(), 3);
    }

    #[test]
    fn impossible_specs_rejected() {
        let spec = PhantomSpec {
            dims: [6, 48, 48],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec, 0).is_err());
        let spec = PhantomSpec {
            radius_range: [0.5, 1.0],
            ..small()
        };
        assert!(spec.validate().is_err());
        let spec = PhantomSpec {
            n_novel_tracts: 0,
            ..small()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn splits() {
        let spec = PhantomSpec {
            dims: [16; 3],
            radius_range: [1.0, 1.5],
            ..PhantomSpec::default()
        };
        let s = generate_splits(&spec, 2, 16, 5).unwrap();
        assert_eq!(s.test.len(), 16);
        assert_eq!(s.pretrain.len(), 2);
        let ids = s.all_subject_ids();
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
        let again = generate_splits(&spec, 2, 16, 5).unwrap();
        assert_eq!(again.one_shot, s.one_shot);
        assert_eq!(again.test, s.test);
        assert!(generate_splits(&spec, 0, 1, 5).is_err());
    }
}
