//! Browser bindings for the static demo page in `www/`.
//!
//! A [`Scene`] holds one phantom subject annotated with its novel tracts.
//! The page can browse the synthetic scans of each masking strategy, sample
//! cutout boxes, and majority-vote noisy copies of the labels.

use tractaug_core::augment::{generate_dataset, sample_box, AugmentationPlan, MaskProvenance, Strategy, SyntheticSample};
use tractaug_core::ensemble::majority_vote;
use tractaug_core::metrics::dice;
use tractaug_core::phantom::{generate_phantom, PhantomSpec};
use tractaug_core::rng::{mix, rng_from};
use tractaug_core::{BinaryMask3D, Geometry, TractLabelMap, Volume3D};
use wasm_bindgen::prelude::*;
use rand::Rng;

/// Overlay colours per tract channel (RGB).
const PALETTE: [[u8; 3]; 6] = [
    [230, 80, 70],
    [70, 160, 230],
    [90, 200, 100],
    [240, 190, 60],
    [180, 100, 220],
    [60, 210, 200],
];

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct Scene {
    image: Volume3D,
    labels: TractLabelMap,
    seed: u64,
    shown: Option<(Volume3D, TractLabelMap)>,
    synthetic: Vec<SyntheticSample>,
}

#[wasm_bindgen]
impl Scene {
    /// One phantom subject of edge `size` voxels.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64) -> Result<Scene, JsValue> {
        let spec = PhantomSpec {
            dims: [size; 3],
            seed,
            ..PhantomSpec::default()
        };
        let p = generate_phantom(&spec, mix(&[seed, 1])).map_err(js_err)?;
        Ok(Scene {
            image: p.image,
            labels: p.novel,
            seed,
            shown: None,
            synthetic: Vec::new(),
        })
    }

    pub fn size(&self) -> usize {
        self.image.geometry().dims()[0]
    }

    pub fn tracts(&self) -> Vec<String> {
        self.labels.names().map(String::from).collect()
    }

    /// Generates the synthetic scans of `strategy` (rc1, rc2, tc1, tc2) and
    /// returns how many there are.
    pub fn augment(&mut self, strategy: &str) -> Result<usize, JsValue> {
        let strategy: Strategy = strategy.parse().map_err(js_err)?;
        let plan = AugmentationPlan::for_labels(strategy, &self.labels, self.seed);
        self.synthetic = generate_dataset(&self.image, &self.labels, &plan).map_err(js_err)?;
        self.shown = None;
        Ok(self.synthetic.len())
    }

    /// Shows synthetic scan `index` and describes its mask as JSON.
    pub fn show(&mut self, index: usize) -> Result<String, JsValue> {
        let s = self
            .synthetic
            .get(index)
            .ok_or_else(|| js_err(format!("no synthetic scan {index}")))?;
        self.shown = Some((s.image.clone(), s.labels.clone()));
        let mask = match &s.provenance {
            MaskProvenance::Box(b) => format!(
                "{{\"box\":{{\"lambda\":{:.4},\"voxels\":{}}}}}",
                b.lambda,
                b.voxel_count()
            ),
            MaskProvenance::Subset(t) => format!(
                "{{\"subset\":[{}]}}",
                t.bits().iter().map(|b| if *b { "1" } else { "0" }).collect::<Vec<_>>().join(",")
            ),
        };
        let counts: Vec<String> = s.labels.channels().iter().map(|c| c.mask.count().to_string()).collect();
        Ok(format!(
            "{{\"strategy\":\"{}\",\"index\":{},\"mask\":{},\"label_voxels\":[{}]}}",
            s.strategy,
            s.index,
            mask,
            counts.join(",")
        ))
    }

    /// Back to the original scan.
    pub fn show_original(&mut self) {
        self.shown = None;
    }

    /// RGBA pixels of axial slice `z` with the labels overlaid.
    pub fn render(&self, z: usize, overlay: bool) -> Vec<u8> {
        let (image, labels) = match &self.shown {
            Some((x, y)) => (x, y),
            None => (&self.image, &self.labels),
        };
        render_slice(image, overlay.then_some(labels), z)
    }

    /// Majority-votes `k` copies of the labels, each with every voxel flipped
    /// with probability `flip`, and shows the vote. Returns JSON with the
    /// mean Dice of the copies and the Dice of the vote.
    pub fn vote(&mut self, k: usize, flip: f64) -> Result<String, JsValue> {
        if k == 0 || !(0.0..=1.0).contains(&flip) {
            return Err(js_err("need k >= 1 and flip in [0, 1]"));
        }
        let mut rng = rng_from(mix(&[self.seed, k as u64, flip.to_bits()]));
        let copies: Vec<TractLabelMap> = (0..k)
            .map(|_| {
                self.labels.map_masks(|m| {
                    let data = m.data().iter().map(|&b| b ^ rng.random_bool(flip)).collect();
                    BinaryMask3D::from_vec(m.geometry().clone(), data).expect("same geometry")
                })
            })
            .collect();
        let voted = majority_vote(&copies).map_err(js_err)?;
        let mean_dice = |y: &TractLabelMap| -> Result<f64, JsValue> {
            let mut total = 0.0;
            for (a, b) in y.channels().iter().zip(self.labels.channels()) {
                total += dice(&a.mask, &b.mask).map_err(js_err)?;
            }
            Ok(total / y.len() as f64)
        };
        let mut single = 0.0;
        for c in &copies {
            single += mean_dice(c)?;
        }
        single /= k as f64;
        let ensemble = mean_dice(&voted)?;
        self.shown = Some((self.image.clone(), voted));
        Ok(format!("{{\"single\":{single:.4},\"vote\":{ensemble:.4}}}"))
    }
}

/// Empirical statistics of `draws` random cutout boxes on a cube of edge
/// `size`: JSON with the mean and standard deviation of the covered volume
/// fraction, and a 20-bin histogram of it.
#[wasm_bindgen]
pub fn box_statistics(size: usize, draws: usize, seed: u64) -> Result<String, JsValue> {
    let g = Geometry::new([size; 3], [1.0; 3]).map_err(js_err)?;
    if draws == 0 {
        return Err(js_err("draws must be >= 1"));
    }
    let mut rng = rng_from(seed);
    let total = g.len() as f64;
    let mut hist = [0usize; 20];
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..draws {
        let f = sample_box(&g, &mut rng).voxel_count() as f64 / total;
        sum += f;
        sq += f * f;
        hist[((f * 20.0) as usize).min(19)] += 1;
    }
    let mean = sum / draws as f64;
    let sd = (sq / draws as f64 - mean * mean).max(0.0).sqrt();
    let hist: Vec<String> = hist.iter().map(|h| h.to_string()).collect();
    Ok(format!(
        "{{\"mean\":{mean:.5},\"sd\":{sd:.5},\"histogram\":[{}]}}",
        hist.join(",")
    ))
}

fn render_slice(image: &Volume3D, labels: Option<&TractLabelMap>, z: usize) -> Vec<u8> {
    let [nx, ny, nz] = image.geometry().dims();
    let z = z.min(nz - 1);
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(nx * ny * 4);
    // rows top to bottom so +y points up on the canvas
    for y in (0..ny).rev() {
        for x in 0..nx {
            let g = ((image.get(x, y, z) - lo) / span * 255.0) as u8;
            let mut px = [g as f32; 3];
            if let Some(labels) = labels {
                for (c, ch) in labels.channels().iter().enumerate() {
                    if ch.mask.get(x, y, z) {
                        let col = PALETTE[c % PALETTE.len()];
                        for i in 0..3 {
                            px[i] = 0.45 * px[i] + 0.55 * col[i] as f32;
                        }
                    }
                }
            }
            out.extend([px[0] as u8, px[1] as u8, px[2] as u8, 255]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_browses_every_strategy() {
        let mut s = Scene::new(16, 3).unwrap();
        assert_eq!(s.tracts().len(), 4);
        for name in ["rc1", "rc2", "tc1", "tc2"] {
            assert_eq!(s.augment(name).unwrap(), 15);
            let info = s.show(14).unwrap();
            assert!(info.contains(&format!("\"strategy\":\"{}\"", name.to_uppercase())), "{info}");
        }
        assert_eq!(s.render(8, true).len(), 16 * 16 * 4);
    }

    #[test]
    fn vote_beats_single_noisy_copies() {
        let mut s = Scene::new(16, 5).unwrap();
        let json = s.vote(9, 0.02).unwrap();
        let v: Vec<f64> = json
            .trim_matches(|c| c == '{' || c == '}')
            .split(',')
            .map(|kv| kv.split(':').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(v[1] > v[0], "{json}");
    }

    #[test]
    fn box_statistics_are_fractions() {
        let json = box_statistics(12, 500, 1).unwrap();
        assert!(json.starts_with("{\"mean\":0."), "{json}");
    }
}
