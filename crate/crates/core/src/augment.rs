//! Random affine augmentation with nearest-neighbour sampling and edge fill.

use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Out-of-bounds source coordinates take the nearest edge pixel.
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_range_deg: f64,
    pub width_shift_range: f64,
    pub height_shift_range: f64,
    pub shear_range: f64,
    pub zoom_range: f64,
    pub horizontal_flip: bool,
    pub fill_mode: FillMode,
    /// Originals drawn per round, and number of rounds.
    pub batch: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_range_deg: 25.0,
            width_shift_range: 0.05,
            height_shift_range: 0.05,
            shear_range: 0.05,
            zoom_range: 0.2,
            horizontal_flip: true,
            fill_mode: FillMode::Nearest,
            batch: 64,
            rounds: 200,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// All ranges zero and flipping off.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_range_deg: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            shear_range: 0.0,
            zoom_range: 0.0,
            horizontal_flip: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.rotation_range_deg) {
            return Err(Error::config("augment.rotation_range_deg", "must lie in [0, 180]"));
        }
        for (field, v) in [
            ("augment.width_shift_range", self.width_shift_range),
            ("augment.height_shift_range", self.height_shift_range),
            ("augment.shear_range", self.shear_range),
            ("augment.zoom_range", self.zoom_range),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a finite fraction >= 0"));
            }
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::config("augment.zoom_range", "must be < 1"));
        }
        Ok(())
    }
}

/// Sampled transform parameters, kept for the reproducibility manifest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rotation_deg: f64,
    /// Shift in pixels.
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear: f64,
    pub zoom_x: f64,
    pub zoom_y: f64,
    pub flip: bool,
}

/// Maps output pixel coordinates `(x, y, 1)` to source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 2],
    /// Mirror the output horizontally after warping.
    pub flip: bool,
    pub params: TransformParams,
}

type Mat3 = [[f64; 3]; 3];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn translate(tx: f64, ty: f64) -> Mat3 {
    [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self::from_params(
            TransformParams {
                rotation_deg: 0.0,
                shift_x: 0.0,
                shift_y: 0.0,
                shear: 0.0,
                zoom_x: 1.0,
                zoom_y: 1.0,
                flip: false,
            },
            (1, 1),
        )
    }

    /// Composes center -> rotate -> shear -> zoom -> shift -> un-center.
    pub fn from_params(params: TransformParams, (height, width): (usize, usize)) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let theta = params.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let rotate = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let shear = [[1.0, params.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let zoom = [[params.zoom_x, 0.0, 0.0], [0.0, params.zoom_y, 0.0], [0.0, 0.0, 1.0]];
        let m = mul(&translate(params.shift_x, params.shift_y), &mul(&zoom, &mul(&shear, &rotate)));
        let m = mul(&translate(cx, cy), &mul(&m, &translate(-cx, -cy)));
        AffineTransform { matrix: [m[0], m[1]], flip: params.flip, params }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.matrix == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    }

    pub fn source(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b] = self.matrix;
        (a[0] * x + a[1] * y + a[2], b[0] * x + b[1] * y + b[2])
    }
}

fn symmetric(rng: &mut impl Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.random_range(-range..=range)
    }
}

/// Draws one transform within the configured ranges.
pub fn sample_transform(rng: &mut impl Rng, config: &AugmentConfig, extents: (usize, usize)) -> AffineTransform {
    let (h, w) = extents;
    let rotation_deg = symmetric(rng, config.rotation_range_deg);
    let shift_x = symmetric(rng, config.width_shift_range * w as f64);
    let shift_y = symmetric(rng, config.height_shift_range * h as f64);
    let shear = symmetric(rng, config.shear_range);
    let zoom_x = 1.0 + symmetric(rng, config.zoom_range);
    let zoom_y = 1.0 + symmetric(rng, config.zoom_range);
    let flip = config.horizontal_flip && rng.random_bool(0.5);
    AffineTransform::from_params(
        TransformParams { rotation_deg, shift_x, shift_y, shear, zoom_x, zoom_y, flip },
        extents,
    )
}

/// Inverse-mapped nearest-neighbour warp of an `[H,W,C]` image.
pub fn apply(image: &Tensor, t: &AffineTransform, fill: FillMode) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape("augment", format!("expected [H,W,C], got {:?}", image.shape())));
    };
    if t.is_identity() {
        return Ok(image.clone());
    }
    let FillMode::Nearest = fill;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let xo = if t.flip { w - 1 - x } else { x };
            let (sx, sy) = t.source(xo as f64, y as f64);
            let ix = sx.round().clamp(0.0, (w - 1) as f64) as usize;
            let iy = sy.round().clamp(0.0, (h - 1) as f64) as usize;
            let base = (iy * w + ix) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new([h, w, c], out)
}

#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub sample: Sample,
    pub source_id: String,
    pub transform: AffineTransform,
}

/// Draws `config.batch` originals per round for `config.rounds` rounds and
/// returns one transformed copy of each draw. Labels and topic ground truth
/// are copied from the source unchanged.
pub fn augment_round(dataset: &[&Sample], config: &AugmentConfig) -> Result<Vec<AugmentedSample>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot augment an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.batch * config.rounds);
    for round in 0..config.rounds {
        let picks: Vec<usize> = if dataset.len() >= config.batch {
            index::sample(&mut rng, dataset.len(), config.batch).into_vec()
        } else {
            (0..config.batch).map(|_| rng.random_range(0..dataset.len())).collect()
        };
        for (slot, i) in picks.into_iter().enumerate() {
            let src = dataset[i];
            let extents = (src.image.shape()[0], src.image.shape()[1]);
            let t = sample_transform(&mut rng, config, extents);
            let image = apply(&src.image, &t, config.fill_mode)?;
            out.push(AugmentedSample {
                sample: Sample {
                    id: format!("{}~aug{round:03}-{slot:02}", src.id),
                    image,
                    herbs: src.herbs.clone(),
                    topics: src.topics.clone(),
                },
                source_id: src.id.clone(),
                transform: t,
            });
        }
    }
    Ok(out)
}

/// Tab-separated manifest: source id, transform parameters, output path.
pub fn write_augment_manifest<'a>(
    rows: impl IntoIterator<Item = (&'a AugmentedSample, &'a str)>,
    mut out: impl Write,
) -> Result<()> {
    writeln!(out, "id\tsource_id\trotation_deg\tshift_x\tshift_y\tshear\tzoom_x\tzoom_y\tflip\tpath")?;
    for (a, path) in rows {
        let p = a.transform.params;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{path}",
            a.sample.id, a.source_id, p.rotation_deg, p.shift_x, p.shift_y, p.shear, p.zoom_x, p.zoom_y, p.flip
        )?;
    }
    Ok(())
}
