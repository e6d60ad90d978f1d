//! Central finite-difference checks of the analytic training gradients.

use gaussfield::field::{loss_and_grads, TrainBatch};
use gaussfield::{Coord, ImageBuffer, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn toy() -> (Model, TrainBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = ImageBuffer::from_fn(8, 8, 4, |r, c| {
        vec![r as f64 / 8.0, c as f64 / 8.0, 0.3, if (r + c) % 3 == 0 { 0.0 } else { 1.0 }]
    })
    .unwrap();
    let cfg = ModelConfig {
        n_gaussians: 10,
        knn_k: 4,
        knn_radius: 0.5,
        grid_levels: 3,
        features_per_level: 2,
        min_res: 2,
        max_res: 8,
        hash_table_log2: 6,
        mlp_hidden_layers: 2,
        mlp_hidden_width: 8,
        ..Default::default()
    };
    let mut model = Model::init(&img, cfg, 4).unwrap();
    for v in model.grid_mut().unwrap().tables_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for p in model.cov_params_mut() {
        *p = [rng.random_range(-2.0..-1.0), rng.random_range(-2.0..-1.0), rng.random_range(-1.5..1.5)];
    }
    let mut pts = |n: usize| -> Vec<Coord> { (0..n).map(|_| Coord::new(rng.random(), rng.random())).collect() };
    let coords = pts(12);
    let mask_coords = pts(12);
    let targets = (0..12).map(|i| [0.1 * i as f64 / 1.2, 0.5, 0.9 - 0.05 * i as f64]).collect();
    let alpha_targets = (0..12).map(|i| (i % 2) as f64).collect();
    (model, TrainBatch { coords, targets, mask_coords, alpha_targets })
}

fn loss(model: &Model, batch: &TrainBatch) -> f64 {
    loss_and_grads(model, batch).unwrap().0.loss
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over one parameter class.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-300)
}

fn check(name: &str, analytic: &[f64], numeric: &[f64], tol: f64) {
    assert!(numeric.iter().any(|&v| v.abs() > 1e-8), "{name}: gradient is trivially zero");
    let e = rel_error(analytic, numeric);
    assert!(e < tol, "{name}: relative error {e:e}");
}

fn numeric(mut get: impl FnMut(f64) -> f64) -> f64 {
    (get(H) - get(-H)) / (2.0 * H)
}

#[test]
fn grid_tables() {
    let (model, batch) = toy();
    let (_, g) = loss_and_grads(&model, &batch).unwrap();
    let touched: Vec<usize> = (0..g.tables.len()).filter(|&i| g.tables[i] != 0.0).collect();
    assert!(!touched.is_empty());
    let mut m = model.clone();
    let num: Vec<f64> = touched
        .iter()
        .map(|&i| {
            let orig = m.grid().unwrap().tables()[i];
            numeric(|h| {
                m.grid_mut().unwrap().tables_mut()[i] = orig + h;
                let l = loss(&m, &batch);
                m.grid_mut().unwrap().tables_mut()[i] = orig;
                l
            })
        })
        .collect();
    let ana: Vec<f64> = touched.iter().map(|&i| g.tables[i]).collect();
    check("grid tables", &ana, &num, 1e-4);
    // Untouched slots have exactly zero gradient.
    let untouched = (0..g.tables.len()).find(|&i| g.tables[i] == 0.0).unwrap();
    let orig = m.grid().unwrap().tables()[untouched];
    let n = numeric(|h| {
        m.grid_mut().unwrap().tables_mut()[untouched] = orig + h;
        let l = loss(&m, &batch);
        m.grid_mut().unwrap().tables_mut()[untouched] = orig;
        l
    });
    assert_eq!(n, 0.0);
}

#[test]
fn covariance_params() {
    let (model, batch) = toy();
    let (_, g) = loss_and_grads(&model, &batch).unwrap();
    let mut m = model.clone();
    let mut num = Vec::new();
    let mut ana = Vec::new();
    for i in 0..m.len() {
        for k in 0..3 {
            let orig = m.cov_params()[i][k];
            num.push(numeric(|h| {
                m.cov_params_mut()[i][k] = orig + h;
                let l = loss(&m, &batch);
                m.cov_params_mut()[i][k] = orig;
                l
            }));
            ana.push(g.cov[i][k]);
        }
    }
    check("covariance", &ana, &num, 1e-4);
}

#[test]
fn color_decoder() {
    let (model, batch) = toy();
    let (_, g) = loss_and_grads(&model, &batch).unwrap();
    let mut m = model.clone();
    let num: Vec<f64> = (0..g.color_mlp.len())
        .map(|i| {
            let orig = m.color_mlp().params()[i];
            numeric(|h| {
                m.color_mlp_mut().params_mut()[i] = orig + h;
                let l = loss(&m, &batch);
                m.color_mlp_mut().params_mut()[i] = orig;
                l
            })
        })
        .collect();
    check("color decoder", &g.color_mlp, &num, 1e-4);
}

#[test]
fn mask_decoder() {
    let (model, batch) = toy();
    let (_, g) = loss_and_grads(&model, &batch).unwrap();
    let ga = g.mask_mlp.unwrap();
    let mut m = model.clone();
    let num: Vec<f64> = (0..ga.len())
        .map(|i| {
            let orig = m.mask_mlp().unwrap().params()[i];
            numeric(|h| {
                m.mask_mlp_mut().unwrap().params_mut()[i] = orig + h;
                let l = loss(&m, &batch);
                m.mask_mlp_mut().unwrap().params_mut()[i] = orig;
                l
            })
        })
        .collect();
    check("mask decoder", &ga, &num, 1e-4);
}
