use fedsim_core::data::{synth_dataset, Batch, SynthTask};
use fedsim_core::model::{ModelKind, ToyModel};
use fedsim_core::rng::{open_unit, standard_normal, stream, Purpose};
use fedsim_core::ParamVector;

const FD_STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-5;
// Coordinates whose gradient is this small are compared absolutely:
// central differences cannot resolve them relative to round-off.
const ABS_FLOOR: f64 = 1e-8;

fn central_difference(model: &ToyModel, w: &ParamVector, batch: &Batch, i: usize) -> f64 {
    let mut plus = w.as_slice().to_vec();
    let mut minus = w.as_slice().to_vec();
    plus[i] += FD_STEP;
    minus[i] -= FD_STEP;
    let lp = model.loss(&ParamVector::from_vec(plus).unwrap(), batch).unwrap();
    let lm = model.loss(&ParamVector::from_vec(minus).unwrap(), batch).unwrap();
    (lp - lm) / (2.0 * FD_STEP)
}

fn small_model(kind: ModelKind) -> (ToyModel, SynthTask) {
    let task = match kind {
        ModelKind::LinearRegression => SynthTask::linear(4, 0.3, 1),
        ModelKind::LogisticClassifier => SynthTask::blobs(4, 3, 1.0, 1),
        ModelKind::MlpSoftdiceSegmenter => SynthTask::disks(5, 0.5),
    };
    (task.model(6), task)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for kind in ModelKind::ALL {
        let (model, task) = small_model(kind);
        let p = model.param_count();
        let mut worst: f64 = 0.0;
        for trial in 0..100u64 {
            let mut rng = stream(trial, Purpose::Init, &[kind as u64]);
            let scale = 0.2 + open_unit(&mut rng);
            let w = ParamVector::from_vec((0..p).map(|_| scale * standard_normal(&mut rng)).collect()).unwrap();
            let b = 1 + (open_unit(&mut rng) * 4.0) as usize;
            let data = task.sample(b, 1000 + trial).unwrap();
            let idx: Vec<usize> = (0..b).collect();
            let batch = data.batch(&idx).unwrap();
            let analytic = model.gradient(&w, &batch).unwrap();
            for i in 0..p {
                let fd = central_difference(&model, &w, &batch, i);
                let a = analytic[i];
                let abs = (a - fd).abs();
                let rel = abs / a.abs().max(fd.abs());
                assert!(
                    abs <= ABS_FLOOR || rel < REL_TOL,
                    "{kind} trial {trial} coord {i}: analytic {a:e} vs fd {fd:e} (rel {rel:e})"
                );
                if abs > ABS_FLOOR {
                    worst = worst.max(rel);
                }
            }
        }
        println!("{kind}: worst relative error {worst:.2e}");
    }
}

#[test]
fn weight_decay_adds_lambda_w() {
    for kind in ModelKind::ALL {
        let (model, task) = small_model(kind);
        let lambda = 1e-3;
        let decayed = model.clone().with_weight_decay(lambda);
        let mut rng = stream(3, Purpose::Init, &[]);
        let w = ParamVector::from_vec((0..model.param_count()).map(|_| standard_normal(&mut rng)).collect()).unwrap();
        let data = task.sample(3, 5).unwrap();
        let batch = data.batch(&[0, 1, 2]).unwrap();
        let g0 = model.gradient(&w, &batch).unwrap();
        let g1 = decayed.gradient(&w, &batch).unwrap();
        for i in 0..w.len() {
            assert_eq!(g1[i], g0[i] + lambda * w[i]);
        }
        assert_eq!(model.loss(&w, &batch).unwrap(), decayed.loss(&w, &batch).unwrap());
    }
}

#[test]
fn linear_stationary_point_has_zero_gradient() {
    let task = SynthTask::linear(5, 0.0, 4);
    let (weights, bias) = task.generating_weights().unwrap();
    let mut w = weights.to_vec();
    w.push(bias);
    let w = ParamVector::from_vec(w).unwrap();
    let model = task.model(0);
    let data = task.sample(30, 8).unwrap();
    let idx: Vec<usize> = (0..30).collect();
    let batch = data.batch(&idx).unwrap();
    assert!(model.loss(&w, &batch).unwrap() < 1e-28);
    let g = model.gradient(&w, &batch).unwrap();
    assert!(g.iter().all(|x| x.abs() < 1e-13), "{g:?}");
}

#[test]
fn loss_and_gradient_are_pure() {
    for kind in ModelKind::ALL {
        let data = synth_dataset(kind, 2, 4).unwrap();
        let model = SynthTask::new(kind, 2).model(8);
        let w = fedsim_core::server::init_params(&model, 1);
        let batch = data.batch(&[0, 1, 2, 3]).unwrap();
        let l1 = model.loss(&w, &batch).unwrap();
        let g1 = model.gradient(&w, &batch).unwrap();
        assert_eq!(l1.to_bits(), model.loss(&w, &batch).unwrap().to_bits());
        assert!(g1.bit_eq(&model.gradient(&w, &batch).unwrap()));
    }
}

#[test]
fn soft_dice_stays_in_unit_interval() {
    let mut rng = stream(11, Purpose::Init, &[]);
    for _ in 0..2000 {
        let n = 1 + (open_unit(&mut rng) * 20.0) as usize;
        let p: Vec<f64> = (0..n).map(|_| open_unit(&mut rng)).collect();
        let g: Vec<f64> = (0..n).map(|_| open_unit(&mut rng).round()).collect();
        let l = fedsim_core::model::soft_dice_loss(&p, &g, 1.0);
        assert!((0.0..=1.0).contains(&l), "{l}");
    }
}

#[test]
fn least_squares_recovers_generating_weights() {
    let task = SynthTask::linear(6, 0.1, 21);
    let data = task.sample(2000, 3).unwrap();
    let d = task.input_dim() + 1;
    let rows: Vec<f64> = data
        .examples()
        .iter()
        .flat_map(|ex| ex.input.iter().copied().chain(std::iter::once(1.0)))
        .collect();
    let x = nalgebra::DMatrix::from_row_slice(data.len(), d, &rows);
    let y = nalgebra::DVector::from_iterator(data.len(), data.examples().iter().map(|e| e.target[0]));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    let beta = xtx.cholesky().unwrap().solve(&xty);
    let (weights, bias) = task.generating_weights().unwrap();
    // Standard error ≈ σ/√n ≈ 0.0022; allow five of them.
    for (b, w) in beta.iter().zip(weights.iter().chain(std::iter::once(&bias))) {
        assert!((b - w).abs() < 0.012, "{b} vs {w}");
    }
}
