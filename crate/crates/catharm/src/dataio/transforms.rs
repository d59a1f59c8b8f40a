//! Image-space reference transforms and the pair builders that expose them
//! to training: k-step rotations (5 degrees per step, bilinear), k-step
//! scalings (pad one pixel per side, resize back), and seeded successor
//! pairing of digit labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DataKind, Dataset};
use crate::pairing::{PairEntry, PairSet, TransformKind};
use crate::tensor::Tensor;

pub const ROTATE_STEP_DEGREES: f64 = 5.0;

fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize]
        }
    };
    at(y0, x0) * (1.0 - dy) * (1.0 - dx)
        + at(y0, x0 + 1.0) * (1.0 - dy) * dx
        + at(y0 + 1.0, x0) * dy * (1.0 - dx)
        + at(y0 + 1.0, x0 + 1.0) * dy * dx
}

/// Rotation about the image center by `degrees` (positive = one step of the
/// reference transform), bilinear, zero fill.
pub fn rotate_image(src: &[f64], h: usize, w: usize, degrees: f64) -> Vec<f64> {
    let theta = degrees.to_radians();
    let (cos, sin) = (theta.cos(), theta.sin());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            // inverse map: rotate output coordinates by -theta
            let sy = cos * dy + sin * dx + cy;
            let sx = -sin * dy + cos * dx + cx;
            out[r * w + c] = bilinear(src, h, w, sy, sx);
        }
    }
    out
}

fn zoom_out_step(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    // pad one pixel per side, then resize (h+2)x(w+2) back to h x w
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let sy = (r as f64 + 0.5) * ph as f64 / h as f64 - 0.5;
            let sx = (c as f64 + 0.5) * pw as f64 / w as f64 - 0.5;
            // padded(y, x) = src(y-1, x-1), zero on the border
            out[r * w + c] = bilinear(src, h, w, sy - 1.0, sx - 1.0);
        }
    }
    out
}

fn zoom_in_step(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    // resize h x w up to (h+2)x(w+2), crop the one-pixel border
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let br = r + 1;
            let bc = c + 1;
            let sy = (br as f64 + 0.5) * h as f64 / ph as f64 - 0.5;
            let sx = (bc as f64 + 0.5) * w as f64 / pw as f64 - 0.5;
            out[r * w + c] = bilinear(src, h, w, sy, sx);
        }
    }
    out
}

/// One signed scale step: positive zooms out (pad + shrink), negative zooms
/// in (enlarge + crop).
pub fn scale_image(src: &[f64], h: usize, w: usize, steps: i64) -> Vec<f64> {
    let mut cur = src.to_vec();
    for _ in 0..steps.unsigned_abs() {
        cur = if steps >= 0 {
            zoom_out_step(&cur, h, w)
        } else {
            zoom_in_step(&cur, h, w)
        };
    }
    cur
}

/// Applies `steps` signed reference-transform steps to a flattened image.
pub fn apply_transform_steps(
    kind: TransformKind,
    src: &[f64],
    h: usize,
    w: usize,
    steps: i64,
) -> Vec<f64> {
    match kind {
        TransformKind::Rotate => {
            let mut cur = src.to_vec();
            let deg = if steps >= 0 {
                ROTATE_STEP_DEGREES
            } else {
                -ROTATE_STEP_DEGREES
            };
            for _ in 0..steps.unsigned_abs() {
                cur = rotate_image(&cur, h, w, deg);
            }
            cur
        }
        TransformKind::Scale => scale_image(src, h, w, steps),
    }
}

/// Internal augmentation used by `Dataset::attach_covariates`: for every base
/// row and k in 1..=max_steps, the k-step transformed image, paired with its
/// base as ((base, transformed), d = -k).
#[allow(clippy::too_many_arguments)]
pub(super) fn augment(
    features: &Tensor,
    labels: &[usize],
    kind: DataKind,
    transform: TransformKind,
    max_steps: usize,
    base_rows: usize,
    start_row_id: usize,
    covariate: &str,
) -> Result<(Tensor, Vec<usize>, PairSet, Vec<i64>), DataError> {
    let DataKind::Image { height, width } = kind else {
        return Err(DataError::NotAnImageDataset);
    };
    let p = height * width;
    let mut data = Vec::with_capacity(base_rows * max_steps * p);
    let mut aug_labels = Vec::with_capacity(base_rows * max_steps);
    let mut entries = Vec::with_capacity(base_rows * max_steps);
    let mut codes = Vec::with_capacity(base_rows * max_steps);
    let mut next_row = start_row_id;
    for base in 0..base_rows {
        let img = &features.data()[base * p..(base + 1) * p];
        let mut cur = img.to_vec();
        for k in 1..=max_steps {
            cur = apply_transform_steps(transform, &cur, height, width, 1);
            data.extend_from_slice(&cur);
            aug_labels.push(labels[base]);
            entries.push(PairEntry {
                i: base,
                j: next_row,
                d: -(k as i64),
            });
            codes.push(k as i64);
            next_row += 1;
        }
    }
    Ok((
        Tensor::from_raw(vec![base_rows * max_steps, p], data),
        aug_labels,
        PairSet {
            covariate: covariate.to_string(),
            entries,
        },
        codes,
    ))
}

/// Standalone form of the transform pair builder: returns the augmented
/// dataset (base rows first, then k-step rows) plus the pair set.
pub fn make_transform_pairs(
    dataset: &Dataset,
    transform: TransformKind,
    max_steps: usize,
) -> Result<(Dataset, PairSet), DataError> {
    let base_rows = dataset.len();
    let (aug_features, aug_labels, pairs, _codes) = augment(
        &dataset.features,
        &dataset.labels,
        dataset.kind,
        transform,
        max_steps,
        base_rows,
        base_rows,
        match transform {
            TransformKind::Rotate => "rotate",
            TransformKind::Scale => "scale",
        },
    )?;
    let features = crate::tensor::concat_rows(&[&dataset.features, &aug_features])
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut labels = dataset.labels.clone();
    labels.extend(aug_labels);
    let mut out = Dataset::from_parts(
        dataset.kind,
        features,
        labels,
        dataset.raw_columns.clone(),
        dataset.numeric_columns.clone(),
    );
    out.n_classes = dataset.n_classes;
    Ok((out, pairs))
}

/// Seeded matching of digit-l images with digit-(l+1) images: both classes
/// shuffled, zipped to min(class sizes); every entry carries d = -1
/// (code(i) - code(j) with code = label).
pub fn make_successor_pairs(
    dataset: &Dataset,
    covariate: &str,
    seed: u64,
) -> Result<PairSet, DataError> {
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_label[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for l in 0..dataset.n_classes.saturating_sub(1) {
        if by_label[l].is_empty() || by_label[l + 1].is_empty() {
            continue;
        }
        let mut src = by_label[l].clone();
        let mut dst = by_label[l + 1].clone();
        src.shuffle(&mut rng);
        dst.shuffle(&mut rng);
        for (&i, &j) in src.iter().zip(dst.iter()) {
            entries.push(PairEntry { i, j, d: -1 });
        }
    }
    if entries.is_empty() {
        return Err(DataError::EmptyClass);
    }
    Ok(PairSet {
        covariate: covariate.to_string(),
        entries,
    })
}
