//! The patch discriminator's score map is a patch classifier applied at every
//! receptive-field window. Checked against explicit crops and against an
//! input-gradient mask.

use mosaic_kd::datakit::{crop_patches, CropMode};
use mosaic_kd::mathcore::{receptive_field, receptive_window_start, ConvLayerSpec};
use mosaic_kd::netzoo::{build_patch_discriminator, DiscriminatorSpec, ModelHandle};
use mosaic_nn::{Pass, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn spec_for(layers: Vec<ConvLayerSpec>) -> DiscriminatorSpec {
    let hidden = vec![6; layers.len() - 1];
    DiscriminatorSpec {
        in_channels: 3,
        layers,
        hidden_channels: hidden,
        final_stride: 1,
        batch_norm: true,
    }
}

pub fn stacks() -> Vec<(usize, Vec<ConvLayerSpec>)> {
    vec![
        (7, vec![ConvLayerSpec::new(3, 2, 1), ConvLayerSpec::new(3, 1, 1)]),
        (
            15,
            vec![ConvLayerSpec::new(3, 2, 1), ConvLayerSpec::new(3, 2, 1), ConvLayerSpec::new(3, 1, 1)],
        ),
    ]
}

fn random_images<T: mosaic_nn::Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.random::<f64>())).collect()).unwrap()
}

/// Puts non-trivial running statistics into every BN layer.
fn warm_up<T: mosaic_nn::Scalar>(d: &mut ModelHandle<T>) {
    for s in 0..3 {
        d.forward(random_images(&[4, 3, 24, 24], 100 + s), Pass::TRAIN).unwrap();
    }
}

/// Worst |score unit − score of its cropped patch| over a valid-mode map.
pub fn valid_mode_diff(l: usize, layers: &[ConvLayerSpec]) -> Result<f32, String> {
    let (rf, jump) = receptive_field(layers).map_err(|e| e.to_string())?;
    if rf != l {
        return Err(format!("receptive field {rf}, expected {l}"));
    }
    let mut d = build_patch_discriminator::<f32>(&spec_for(layers.to_vec()), 3).unwrap();
    warm_up(&mut d);
    let (h, w) = (29, 31);
    let x = random_images::<f32>(&[2, 3, h, w], 7);
    let scores = d.forward(x.clone(), Pass::EVAL.valid()).unwrap();
    let (_, _, gh, gw) = scores.dims4();
    if (gh, gw) != ((h - l) / jump + 1, (w - l) / jump + 1) {
        return Err(format!("score grid {gh}x{gw}"));
    }
    let crops = crop_patches(&x, l, jump, CropMode::Grid).unwrap();
    if crops.positions.len() != 2 * gh * gw {
        return Err(format!("{} crops for {} units", crops.positions.len(), 2 * gh * gw));
    }
    let patch_scores = d.forward(crops.patches.clone(), Pass::EVAL.valid()).unwrap();
    let mut worst = 0f32;
    for (m, &(i, r, c)) in crops.positions.iter().enumerate() {
        let unit = scores.data()[(i * gh + r / jump) * gw + c / jump];
        worst = worst.max((unit - patch_scores.data()[m]).abs());
    }
    Ok(worst)
}

/// Same comparison for the interior units of a zero-padded forward pass.
/// Returns the worst difference and how many units were interior.
pub fn padded_interior_diff(l: usize, layers: &[ConvLayerSpec]) -> (f32, usize) {
    let mut d = build_patch_discriminator::<f32>(&spec_for(layers.to_vec()), 5).unwrap();
    warm_up(&mut d);
    let (h, w) = (32, 32);
    let x = random_images::<f32>(&[1, 3, h, w], 9);
    let scores = d.forward(x.clone(), Pass::EVAL).unwrap();
    let (_, _, gh, gw) = scores.dims4();
    let mut checked = 0;
    let mut worst = 0f32;
    for u in 0..gh {
        for v in 0..gw {
            let r0 = receptive_window_start(layers, u, false).unwrap();
            let c0 = receptive_window_start(layers, v, false).unwrap();
            if r0 < 0 || c0 < 0 || r0 as usize + l > h || c0 as usize + l > w {
                continue;
            }
            let (r0, c0) = (r0 as usize, c0 as usize);
            let mut crop = Vec::with_capacity(3 * l * l);
            for ch in 0..3 {
                for y in r0..r0 + l {
                    crop.extend_from_slice(&x.data()[(ch * h + y) * w + c0..(ch * h + y) * w + c0 + l]);
                }
            }
            let crop = Tensor::from_vec(&[1, 3, l, l], crop).unwrap();
            let s = d.forward(crop, Pass::EVAL.valid()).unwrap().data()[0];
            worst = worst.max((s - scores.data()[u * gw + v]).abs());
            checked += 1;
        }
    }
    (worst, checked)
}

/// Window of input pixels with a non-zero gradient for score unit (u, v):
/// `(first row, rows, first col, cols)`.
fn gradient_support(d: &mut ModelHandle<f64>, x: &Tensor<f64>, u: usize, v: usize) -> (usize, usize, usize, usize) {
    let (_, ch, h, w) = x.dims4();
    let scores = d.forward(x.clone(), Pass::EVAL.valid().recording()).unwrap();
    let (_, _, _, gw) = scores.dims4();
    let mut probe = Tensor::zeros(scores.shape());
    probe.data_mut()[u * gw + v] = 1.0;
    let gx = d.backward(probe).unwrap();
    let (mut min_r, mut max_r, mut min_c, mut max_c) = (usize::MAX, 0, usize::MAX, 0);
    for c in 0..ch {
        for y in 0..h {
            for xx in 0..w {
                if gx.data()[(c * h + y) * w + xx] != 0.0 {
                    min_r = min_r.min(y);
                    max_r = max_r.max(y);
                    min_c = min_c.min(xx);
                    max_c = max_c.max(xx);
                }
            }
        }
    }
    (min_r, max_r + 1 - min_r, min_c, max_c + 1 - min_c)
}

/// Receptive field and jump measured purely by gradient masking: the extent
/// of the input support of one unit, and the shift between neighbours. Also
/// confirms that a pixel just outside the window cannot move the unit.
pub fn probe_receptive_field(layers: &[ConvLayerSpec]) -> Result<(usize, usize), String> {
    let mut d = build_patch_discriminator::<f64>(&spec_for(layers.to_vec()), 11).unwrap();
    warm_up(&mut d);
    let (h, w) = (27, 27);
    let x = random_images::<f64>(&[1, 3, h, w], 13);
    let scores = d.forward(x.clone(), Pass::EVAL.valid()).unwrap();
    let (_, _, gh, gw) = scores.dims4();
    let (u, v) = (gh / 2, gw - 2);
    let (r0, rows, c0, cols) = gradient_support(&mut d, &x, u, v);
    let (r1, _, _, _) = gradient_support(&mut d, &x, u + 1, v);
    if rows != cols {
        return Err(format!("support is {rows}x{cols}"));
    }
    let mut xp = x.clone();
    let outside_row = if r0 > 0 { r0 - 1 } else { r0 + rows };
    xp.data_mut()[outside_row * w + c0] += 0.5;
    let sp = d.forward(xp, Pass::EVAL.valid()).unwrap();
    if sp.data()[u * gw + v] != scores.data()[u * gw + v] {
        return Err("pixel outside the window changed the unit".into());
    }
    Ok((rows, r1 - r0))
}
