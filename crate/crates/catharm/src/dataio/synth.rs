//! Deterministic synthetic datasets.
//!
//! `synth_monotone` is the ordinal-covariate fixture with recorded ground
//! truth. `synth_digits` renders seven-segment digit glyphs at 28x28 for the
//! image experiments. `synth_credit` / `synth_income` emit CSV+schema text
//! with the same shape profile as the German (58 features, `foreigner`,
//! `age`) and Adult (100 features, `gender`, `age`) tasks: a latent score
//! drives the label, the nuisance covariate shifts features only, so
//! invariance training can remove it without hurting accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{DataKind, Dataset};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian features whose mean shifts along a fixed direction with an
/// ordinal covariate g in {0,1,2}; the class-1 log-odds shift by effect*g.
/// Ground-truth probabilities are recorded on the dataset.
pub fn synth_monotone(m: usize, p: usize, effect: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // fixed direction with |w| = 2 so logits have usable variance
    let mut w: Vec<f64> = (0..p).map(|_| gauss(&mut rng)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in w.iter_mut() {
        *v *= 2.0 / norm;
    }
    // mean shift mu = effect * w / |w|^2 so that w . mu = effect
    let mu: Vec<f64> = w.iter().map(|v| v * effect / 4.0).collect();

    let mut data = Vec::with_capacity(m * p);
    let mut labels = Vec::with_capacity(m);
    let mut gvals = Vec::with_capacity(m);
    let mut truth = Vec::with_capacity(m);
    for _ in 0..m {
        let g = rng.random_range(0..3u32) as f64;
        let mut logit = -effect; // centers the shift at g = 1
        for j in 0..p {
            let z = gauss(&mut rng);
            let x = z + g * mu[j];
            data.push(x);
            logit += w[j] * x;
        }
        let p1 = sigmoid(logit);
        let y = usize::from(rng.random_range(0.0..1.0) < p1);
        labels.push(y);
        gvals.push(g);
        truth.push(p1);
    }
    let mut raw = BTreeMap::new();
    raw.insert("g".to_string(), gvals);
    let mut ds = Dataset::from_parts(
        DataKind::Tabular,
        Tensor::from_raw(vec![m, p], data),
        labels,
        raw,
        vec![true; p],
    );
    ds.ground_truth = Some(truth);
    ds
}

// seven-segment encodings: a b c d e f g
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],    // 0
    [false, true, true, false, false, false, false], // 1
    [true, true, false, true, true, false, true],   // 2
    [true, true, true, true, false, false, true],   // 3
    [false, true, true, false, false, true, true],  // 4
    [true, false, true, true, false, true, true],   // 5
    [true, false, true, true, true, true, true],    // 6
    [true, true, true, false, false, false, false], // 7
    [true, true, true, true, true, true, true],     // 8
    [true, true, true, true, false, true, true],    // 9
];

fn fill(img: &mut [f64], w: usize, y0: i64, y1: i64, x0: i64, x1: i64, q: f64) {
    for y in y0..=y1 {
        for x in x0..=x1 {
            if y >= 0 && x >= 0 && (y as usize) < w && (x as usize) < w {
                img[y as usize * w + x as usize] = q;
            }
        }
    }
}

fn render_digit(digit: usize, dx: i64, dy: i64, t: i64, q: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const W: usize = 28;
    let mut img = vec![0.0; W * W];
    let segs = SEGMENTS[digit];
    let (left, right, top, mid, bot) = (8 + dx, 19 + dx, 5 + dy, 13 + dy, 21 + dy);
    if segs[0] {
        fill(&mut img, W, top, top + t - 1, left + 1, right - 1, q);
    }
    if segs[6] {
        fill(&mut img, W, mid, mid + t - 1, left + 1, right - 1, q);
    }
    if segs[3] {
        fill(&mut img, W, bot, bot + t - 1, left + 1, right - 1, q);
    }
    if segs[5] {
        fill(&mut img, W, top, mid, left, left + t - 1, q);
    }
    if segs[1] {
        fill(&mut img, W, top, mid, right - t + 1, right, q);
    }
    if segs[4] {
        fill(&mut img, W, mid, bot, left, left + t - 1, q);
    }
    if segs[2] {
        fill(&mut img, W, mid, bot, right - t + 1, right, q);
    }
    for v in img.iter_mut() {
        *v = (*v + 0.02 * gauss(rng)).clamp(0.0, 1.0);
    }
    img
}

/// Seeded 28x28 digit glyphs, `per_class` of each class 0..9, with jittered
/// position, stroke thickness and intensity.
pub fn synth_digits(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = per_class * 10;
    let mut data = Vec::with_capacity(m * 784);
    let mut labels = Vec::with_capacity(m);
    for digit in 0..10usize {
        for _ in 0..per_class {
            let dx = rng.random_range(-2..=2i64);
            let dy = rng.random_range(-2..=2i64);
            let t = rng.random_range(2..=3i64);
            let q = rng.random_range(0.7..1.0);
            data.extend(render_digit(digit, dx, dy, t, q, &mut rng));
            labels.push(digit);
        }
    }
    Dataset::from_parts(
        DataKind::Image {
            height: 28,
            width: 28,
        },
        Tensor::from_raw(vec![m, 784], data),
        labels,
        BTreeMap::new(),
        vec![false; 784],
    )
}

struct CatCol {
    name: &'static str,
    k: usize,
    alpha_h: f64,
    beta_nuis: f64,
    gamma_age: f64,
    sigma: f64,
}

impl CatCol {
    fn sample(&self, h: f64, nuis: f64, age_z: f64, rng: &mut ChaCha8Rng) -> usize {
        let score = self.alpha_h * h
            + self.beta_nuis * nuis
            + self.gamma_age * age_z
            + self.sigma * gauss(rng);
        let t = sigmoid(score);
        ((t * self.k as f64) as usize).min(self.k - 1)
    }
}

/// Guarantees every category of every categorical column appears at least
/// once so the one-hot feature count is exact.
fn force_category_coverage(cats: &mut [Vec<usize>], ks: &[usize]) {
    let m = cats[0].len();
    for (col, &k) in cats.iter_mut().zip(ks.iter()) {
        for missing in 0..k {
            if !col.contains(&missing) {
                let row = (missing * 37 + 11) % m;
                col[row] = missing;
            }
        }
    }
}

fn render_csv(
    header: &[String],
    numeric: &[Vec<f64>],
    cats: &[Vec<usize>],
    cat_names: &[&str],
    label_name: &str,
    labels: &[&str],
    numeric_names: &[&str],
) -> String {
    let m = labels.len();
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..m {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        for name in header.iter() {
            if name == label_name {
                fields.push(labels[r].to_string());
            } else if let Some(ni) = numeric_names.iter().position(|n| n == name) {
                let v = numeric[ni][r];
                if (v - v.round()).abs() < 1e-9 {
                    fields.push(format!("{}", v.round() as i64));
                } else {
                    fields.push(format!("{v:.3}"));
                }
            } else if let Some(ci) = cat_names.iter().position(|n| n == name) {
                fields.push(format!("v{}", cats[ci][r]));
            } else {
                fields.push(String::new());
            }
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// German-credit-shaped stand-in: 58 features after one-hot (6 numeric + 52
/// one-hot), binary label (~30% positive), binary `foreigner` nuisance that
/// shifts features only, ordinal `age` that also shifts features.
pub fn synth_credit(m: usize, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cat_cols = [
        CatCol { name: "status", k: 4, alpha_h: 1.2, beta_nuis: 0.4, gamma_age: 0.0, sigma: 0.8 },
        CatCol { name: "credit_history", k: 5, alpha_h: 1.0, beta_nuis: 0.2, gamma_age: 0.2, sigma: 0.8 },
        CatCol { name: "purpose", k: 10, alpha_h: 0.3, beta_nuis: 0.9, gamma_age: 0.0, sigma: 1.0 },
        CatCol { name: "savings", k: 5, alpha_h: 1.1, beta_nuis: 0.3, gamma_age: 0.2, sigma: 0.9 },
        CatCol { name: "employment", k: 5, alpha_h: 0.8, beta_nuis: 0.5, gamma_age: 0.6, sigma: 0.9 },
        CatCol { name: "personal_status", k: 4, alpha_h: 0.2, beta_nuis: 0.6, gamma_age: 0.4, sigma: 1.0 },
        CatCol { name: "other_debtors", k: 3, alpha_h: 0.5, beta_nuis: 0.7, gamma_age: 0.0, sigma: 0.9 },
        CatCol { name: "property", k: 4, alpha_h: 0.9, beta_nuis: 0.3, gamma_age: 0.5, sigma: 0.9 },
        CatCol { name: "other_plans", k: 3, alpha_h: 0.6, beta_nuis: 0.4, gamma_age: 0.0, sigma: 0.9 },
        CatCol { name: "housing", k: 3, alpha_h: 0.5, beta_nuis: 0.5, gamma_age: 0.6, sigma: 0.9 },
        CatCol { name: "job", k: 4, alpha_h: 1.0, beta_nuis: 0.4, gamma_age: 0.2, sigma: 0.9 },
    ];
    let mut numeric: Vec<Vec<f64>> = vec![Vec::with_capacity(m); 6];
    let mut cats: Vec<Vec<usize>> = vec![Vec::with_capacity(m); cat_cols.len() + 1];
    let mut labels: Vec<&str> = Vec::with_capacity(m);
    for _ in 0..m {
        let h = gauss(&mut rng);
        let fgn = f64::from(rng.random_range(0.0..1.0) < 0.45);
        let age = (38.0 + 11.0 * gauss(&mut rng)).clamp(19.0, 75.0).round();
        let age_z = (age - 38.0) / 11.0;
        let duration = (20.0 - 5.0 * h + 3.0 * fgn + 1.5 * age_z + 5.0 * gauss(&mut rng))
            .clamp(4.0, 72.0)
            .round();
        let amount = (3200.0 - 900.0 * h + 600.0 * fgn + 200.0 * age_z
            + 1100.0 * gauss(&mut rng))
        .clamp(250.0, 20000.0)
        .round();
        let installment = (2.5 - 0.4 * h + 0.3 * fgn + 0.8 * gauss(&mut rng))
            .clamp(1.0, 4.0)
            .round();
        let residence = (2.5 + 0.5 * age_z + 0.8 * gauss(&mut rng)).clamp(1.0, 4.0).round();
        let credits = (1.4 + 0.3 * h + 0.3 * age_z + 0.5 * gauss(&mut rng))
            .clamp(1.0, 4.0)
            .round();
        numeric[0].push(duration);
        numeric[1].push(amount);
        numeric[2].push(installment);
        numeric[3].push(residence);
        numeric[4].push(age);
        numeric[5].push(credits);
        for (ci, col) in cat_cols.iter().enumerate() {
            cats[ci].push(col.sample(h, fgn, age_z, &mut rng));
        }
        cats[cat_cols.len()].push(fgn as usize); // foreigner
        let p_bad = sigmoid(-1.7 * h - 0.85);
        labels.push(if rng.random_range(0.0..1.0) < p_bad {
            "bad"
        } else {
            "good"
        });
    }
    let mut ks: Vec<usize> = cat_cols.iter().map(|c| c.k).collect();
    ks.push(2);
    force_category_coverage(&mut cats, &ks);

    let numeric_names = [
        "duration",
        "amount",
        "installment_rate",
        "present_residence",
        "age",
        "existing_credits",
    ];
    let mut cat_names: Vec<&str> = cat_cols.iter().map(|c| c.name).collect();
    cat_names.push("foreigner");
    let mut header: Vec<String> = numeric_names.iter().map(|s| s.to_string()).collect();
    header.extend(cat_names.iter().map(|s| s.to_string()));
    header.push("credit_risk".to_string());
    let csv = render_csv(
        &header,
        &numeric,
        &cats,
        &cat_names,
        "credit_risk",
        &labels,
        &numeric_names,
    );

    let mut schema = String::new();
    for n in numeric_names {
        let role = if n == "age" { "both" } else { "feature" };
        let _ = writeln!(schema, "{n},numeric,{role}");
    }
    for n in &cat_names {
        let role = if *n == "foreigner" { "both" } else { "feature" };
        let _ = writeln!(schema, "{n},categorical,{role}");
    }
    schema.push_str("credit_risk,categorical,label\n");
    (csv, schema)
}

/// Adult-census-shaped stand-in: 100 features after one-hot (6 numeric + 94
/// one-hot), binary label (~21% positive), binary `gender` nuisance shifting
/// features only.
pub fn synth_income(m: usize, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cat_cols = [
        CatCol { name: "workclass", k: 8, alpha_h: 0.5, beta_nuis: 0.3, gamma_age: 0.1, sigma: 0.9 },
        CatCol { name: "education", k: 16, alpha_h: 1.4, beta_nuis: 0.1, gamma_age: 0.0, sigma: 1.0 },
        CatCol { name: "marital_status", k: 7, alpha_h: 0.4, beta_nuis: 0.8, gamma_age: 0.6, sigma: 0.9 },
        CatCol { name: "occupation", k: 14, alpha_h: 0.9, beta_nuis: 1.0, gamma_age: 0.0, sigma: 1.0 },
        CatCol { name: "relationship", k: 6, alpha_h: 0.3, beta_nuis: 1.4, gamma_age: 0.3, sigma: 0.9 },
        CatCol { name: "race", k: 5, alpha_h: 0.1, beta_nuis: 0.0, gamma_age: 0.0, sigma: 1.0 },
        CatCol { name: "native_region", k: 36, alpha_h: 0.15, beta_nuis: 0.0, gamma_age: 0.0, sigma: 1.0 },
    ];
    let mut numeric: Vec<Vec<f64>> = vec![Vec::with_capacity(m); 6];
    let mut cats: Vec<Vec<usize>> = vec![Vec::with_capacity(m); cat_cols.len() + 1];
    let mut labels: Vec<&str> = Vec::with_capacity(m);
    for _ in 0..m {
        let h = gauss(&mut rng);
        let male = f64::from(rng.random_range(0.0..1.0) < 0.67);
        let age = (38.0 + 13.0 * gauss(&mut rng)).clamp(17.0, 90.0).round();
        let age_z = (age - 38.0) / 13.0;
        let fnlwgt = (190000.0 * (0.4 * gauss(&mut rng)).exp()).round();
        let education_num = (10.0 + 2.2 * h + 0.3 * male + 1.5 * gauss(&mut rng))
            .clamp(1.0, 16.0)
            .round();
        let capital_gain = if h + 0.3 * gauss(&mut rng) > 1.3 {
            (2000.0 + 3000.0 * (h - 1.0)).round().max(0.0)
        } else {
            0.0
        };
        let capital_loss = if -h + 0.4 * gauss(&mut rng) > 1.8 {
            (1500.0 + 400.0 * gauss(&mut rng)).round().max(0.0)
        } else {
            0.0
        };
        let hours = (40.0 + 3.0 * h + 4.0 * male + 6.0 * gauss(&mut rng))
            .clamp(5.0, 99.0)
            .round();
        numeric[0].push(age);
        numeric[1].push(fnlwgt);
        numeric[2].push(education_num);
        numeric[3].push(capital_gain);
        numeric[4].push(capital_loss);
        numeric[5].push(hours);
        for (ci, col) in cat_cols.iter().enumerate() {
            cats[ci].push(col.sample(h, male, age_z, &mut rng));
        }
        cats[cat_cols.len()].push(male as usize); // gender
        let p_high = sigmoid(1.8 * h - 1.35);
        labels.push(if rng.random_range(0.0..1.0) < p_high {
            ">50K"
        } else {
            "<=50K"
        });
    }
    let mut ks: Vec<usize> = cat_cols.iter().map(|c| c.k).collect();
    ks.push(2);
    force_category_coverage(&mut cats, &ks);

    let numeric_names = [
        "age",
        "final_weight",
        "education_num",
        "capital_gain",
        "capital_loss",
        "hours_per_week",
    ];
    let mut cat_names: Vec<&str> = cat_cols.iter().map(|c| c.name).collect();
    cat_names.push("gender");
    let mut header: Vec<String> = numeric_names.iter().map(|s| s.to_string()).collect();
    header.extend(cat_names.iter().map(|s| s.to_string()));
    header.push("income".to_string());
    let csv = render_csv(
        &header,
        &numeric,
        &cats,
        &cat_names,
        "income",
        &labels,
        &numeric_names,
    );

    let mut schema = String::new();
    for n in numeric_names {
        let role = if n == "age" { "both" } else { "feature" };
        let _ = writeln!(schema, "{n},numeric,{role}");
    }
    for n in &cat_names {
        let role = if *n == "gender" { "both" } else { "feature" };
        let _ = writeln!(schema, "{n},categorical,{role}");
    }
    schema.push_str("income,categorical,label\n");
    (csv, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::load_tabular_csv;
    use std::io::Write;

    #[test]
    fn monotone_determinism() {
        let a = synth_monotone(50, 5, 2.0, 9);
        let b = synth_monotone(50, 5, 2.0, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_eq!(a.feature_dim(), 5);
        assert!(a.ground_truth.is_some());
    }

    #[test]
    fn monotone_effect_zero_label_independent_of_g() {
        let ds = synth_monotone(10_000, 6, 0.0, 3);
        let g = &ds.raw_columns["g"];
        // 2x3 chi-square independence test; df = 2, 1% critical value 9.21
        let mut table = [[0f64; 3]; 2];
        for (i, &y) in ds.labels.iter().enumerate() {
            table[y][g[i] as usize] += 1.0;
        }
        let n: f64 = 10_000.0;
        let row: Vec<f64> = (0..2).map(|r| table[r].iter().sum()).collect();
        let col: Vec<f64> = (0..3).map(|c| table[0][c] + table[1][c]).collect();
        let mut chi2 = 0.0;
        for r in 0..2 {
            for c in 0..3 {
                let e = row[r] * col[c] / n;
                chi2 += (table[r][c] - e).powi(2) / e;
            }
        }
        assert!(chi2 < 9.21, "chi2={chi2}");
    }

    #[test]
    fn monotone_effect_two_is_strictly_increasing() {
        let ds = synth_monotone(10_000, 6, 2.0, 4);
        let g = &ds.raw_columns["g"];
        let mut pos = [0.0f64; 3];
        let mut tot = [0.0f64; 3];
        for (i, &y) in ds.labels.iter().enumerate() {
            let gi = g[i] as usize;
            tot[gi] += 1.0;
            pos[gi] += y as f64;
        }
        let rates: Vec<f64> = (0..3).map(|i| pos[i] / tot[i]).collect();
        assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
    }

    #[test]
    fn digit_glyphs_are_valid_images() {
        let a = synth_digits(3, 7);
        let b = synth_digits(3, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert_eq!(a.feature_dim(), 784);
        assert_eq!(a.kind, DataKind::Image { height: 28, width: 28 });
        assert!(a.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for d in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == d).count(), 3);
        }
    }

    fn load_generated(csv: &str, schema: &str) -> crate::dataio::Dataset {
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("d.csv");
        let sp = dir.path().join("d.schema");
        std::fs::File::create(&cp)
            .unwrap()
            .write_all(csv.as_bytes())
            .unwrap();
        std::fs::File::create(&sp)
            .unwrap()
            .write_all(schema.as_bytes())
            .unwrap();
        load_tabular_csv(&cp, &sp).unwrap()
    }

    #[test]
    fn credit_standin_has_58_features() {
        let (csv, schema) = synth_credit(400, 11);
        let (csv2, _) = synth_credit(400, 11);
        assert_eq!(csv, csv2);
        let ds = load_generated(&csv, &schema);
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.feature_dim(), 58);
        assert_eq!(ds.dropped_rows, 0);
        assert!(ds.raw_columns.contains_key("foreigner"));
        assert!(ds.raw_columns.contains_key("age"));
        assert_eq!(ds.n_classes, 2);
    }

    #[test]
    fn income_standin_has_100_features() {
        let (csv, schema) = synth_income(600, 13);
        let ds = load_generated(&csv, &schema);
        assert_eq!(ds.len(), 600);
        assert_eq!(ds.feature_dim(), 100);
        assert!(ds.raw_columns.contains_key("gender"));
        assert_eq!(ds.n_classes, 2);
    }
}
