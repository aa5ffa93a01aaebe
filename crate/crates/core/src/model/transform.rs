//! Online (per-epoch) transforms: intensity scale and shift, additive
//! Gaussian noise, and axis flips. Flips act on image and labels together;
//! the intensity changes touch the image only.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::volume::{BinaryMask3D, Geometry, TractLabelMap, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineTransformConfig {
    pub enabled: bool,
    /// Multiplicative intensity factor drawn uniformly from this range.
    pub scale_range: [f32; 2],
    /// Additive intensity offset drawn uniformly from this range.
    pub shift_range: [f32; 2],
    pub noise_sigma: f32,
    /// Per-axis flip probability.
    pub flip_probability: f64,
}

impl Default for OnlineTransformConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_range: [0.95, 1.05],
            shift_range: [-0.03, 0.03],
            noise_sigma: 0.0,
            flip_probability: 0.0,
        }
    }
}

impl OnlineTransformConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: [f32; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ok_range(self.scale_range) || !ok_range(self.shift_range) {
            return Err(Error::Invalid("transform ranges must be finite with min <= max".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Invalid("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Invalid("flip_probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng64, r: [f32; 2]) -> f32 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Draws `(scale, shift)` in that order.
pub fn draw_intensity(config: &OnlineTransformConfig, rng: &mut Rng64) -> (f32, f32) {
    let scale = uniform(rng, config.scale_range);
    let shift = uniform(rng, config.shift_range);
    (scale, shift)
}

/// Whether the transform needs the whole volume (noise or flips) rather than
/// acting on extracted features alone.
pub fn needs_volume(config: &OnlineTransformConfig) -> bool {
    config.enabled && (config.noise_sigma > 0.0 || config.flip_probability > 0.0)
}

/// Source index of each output voxel after flipping the chosen axes.
fn flip_index(g: &Geometry, axes: [bool; 3], index: usize) -> usize {
    let dims = g.dims();
    let mut c = g.coords(index);
    for a in 0..3 {
        if axes[a] {
            c[a] = dims[a] - 1 - c[a];
        }
    }
    g.index(c[0], c[1], c[2])
}

pub fn flip_volume(x: &Volume3D, axes: [bool; 3]) -> Volume3D {
    let g = x.geometry();
    let data = (0..g.len()).map(|i| x.data()[flip_index(g, axes, i)]).collect();
    Volume3D::from_vec(g.clone(), data).expect("same geometry")
}

pub fn flip_mask(m: &BinaryMask3D, axes: [bool; 3]) -> BinaryMask3D {
    let g = m.geometry();
    let data = (0..g.len()).map(|i| m.data()[flip_index(g, axes, i)]).collect();
    BinaryMask3D::from_vec(g.clone(), data).expect("same geometry")
}

/// Draws and applies one random transform. With the config disabled the
/// inputs are returned unchanged and `rng` is not advanced.
///
/// Draw order: flips (x, y, z), scale, shift, then noise per voxel.
pub fn online_transform(
    x: &Volume3D,
    y: &TractLabelMap,
    config: &OnlineTransformConfig,
    rng: &mut Rng64,
) -> Result<(Volume3D, TractLabelMap)> {
    x.geometry().ensure_same(y.geometry())?;
    if !config.enabled {
        return Ok((x.clone(), y.clone()));
    }
    let mut axes = [false; 3];
    if config.flip_probability > 0.0 {
        for a in &mut axes {
            *a = rng.random_bool(config.flip_probability);
        }
    }
    let (scale, shift) = draw_intensity(config, rng);

    let (mut image, labels) = if axes.iter().any(|&a| a) {
        (flip_volume(x, axes), y.map_masks(|m| flip_mask(m, axes)))
    } else {
        (x.clone(), y.clone())
    };
    let mut data = image.into_data();
    for v in &mut data {
        *v = *v * scale + shift;
    }
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, config.noise_sigma).expect("sigma >= 0");
        for v in &mut data {
            *v += noise.sample(rng);
        }
    }
    image = Volume3D::from_vec(labels.geometry().clone(), data)?;
    Ok((image, labels))
}
