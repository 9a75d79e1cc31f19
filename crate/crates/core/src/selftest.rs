//! Fast self-contained oracle suite.
//!
//! Backs the CLI's `selftest` command: finite-difference agreement for
//! gradients and Hessian-vector products on the benchmark tapes, group
//! closure, criterion descent, the scalar Newton fixed point, the Kronecker
//! vec identity, and checkpoint round-trips. The whole suite runs in
//! seconds.

use crate::harness::{make_mlp_classifier, make_rosenbrock, make_tiny_lstm_lm};
use crate::kv::KvDoc;
use crate::lie_groups::{FactorKind, GroupKind, QFactor};
use crate::matrix::{kron, kron_reshape, solve_lu, vec_mat, Matrix, Vector};
use crate::optimizers::{OptimizerConfig, OptimizerKind, OptimizerState};
use crate::problem::Problem;
use crate::rng::SeedStream;

/// One named check's outcome.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

type Check = (&'static str, fn() -> Result<(), String>);

/// Runs every check and reports per-check results.
pub fn run_selftest() -> Vec<CheckResult> {
    let checks: Vec<Check> = vec![
        ("gradient-fd-agreement", check_gradient_fd),
        ("hvp-fd-agreement", check_hvp_fd),
        ("hvp-symmetry", check_hvp_symmetry),
        ("group-closure", check_group_closure),
        ("criterion-descent", || descent_check(false)),
        ("scalar-newton-fixed-point", check_scalar_fixed_point),
        ("kron-vec-identity", check_kron_identity),
        ("checkpoint-roundtrip", check_checkpoint_roundtrip),
        ("rosenbrock-convergence", check_rosenbrock_convergence),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(()) => CheckResult { name, passed: true, detail: String::from("ok") },
            Err(detail) => CheckResult { name, passed: false, detail },
        })
        .collect()
}

fn bench_problems() -> Result<Vec<Box<dyn Problem>>, String> {
    Ok(vec![
        Box::new(make_rosenbrock().map_err(|e| e.to_string())?),
        Box::new(make_mlp_classifier(&[2, 8, 2], 40, 3).map_err(|e| e.to_string())?),
        Box::new(make_tiny_lstm_lm(8, 4, 5, 3).map_err(|e| e.to_string())?),
    ])
}

fn rand_params(p: &dyn Problem, s: &mut SeedStream) -> Vec<Matrix> {
    p.param_shapes()
        .iter()
        .map(|&(r, c)| Matrix::from_fn(r, c, |_, _| 0.3 * s.standard_normal()))
        .collect()
}

fn flatten(tensors: &[Matrix]) -> Vec<f64> {
    tensors.iter().flat_map(|m| vec_mat(m).into_vec()).collect()
}

fn check_gradient_fd() -> Result<(), String> {
    let mut s = SeedStream::new(101, "selftest-grad");
    for p in bench_problems()? {
        let params = rand_params(p.as_ref(), &mut s);
        let batch = p.make_batch(0, 4);
        let (_, g) = p.loss_and_gradient(&params, &batch).map_err(|e| e.to_string())?;
        let g = flatten(&g);
        let scale = g.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let h = 1e-5;
        let mut k = 0;
        for ti in 0..p.param_shapes().len() {
            let (rows, cols) = p.param_shapes()[ti];
            for j in 0..cols {
                for i in 0..rows {
                    let base = params[ti].get(i, j);
                    let mut plus = params.clone();
                    plus[ti].set(i, j, base + h);
                    let mut minus = params.clone();
                    minus[ti].set(i, j, base - h);
                    let fp = p.loss(&plus, &batch).map_err(|e| e.to_string())?;
                    let fm = p.loss(&minus, &batch).map_err(|e| e.to_string())?;
                    let fd = (fp - fm) / (2.0 * h);
                    if (fd - g[k]).abs() > 1e-6 * scale {
                        return Err(format!(
                            "{}: gradient entry {k} disagrees with finite differences: {} vs {fd}",
                            p.name(),
                            g[k]
                        ));
                    }
                    k += 1;
                }
            }
        }
    }
    Ok(())
}

fn check_hvp_fd() -> Result<(), String> {
    let mut s = SeedStream::new(103, "selftest-hvp");
    for p in bench_problems()? {
        let params = rand_params(p.as_ref(), &mut s);
        let batch = p.make_batch(1, 4);
        let v: Vec<Matrix> = p
            .param_shapes()
            .iter()
            .map(|&(r, c)| Matrix::from_fn(r, c, |_, _| s.standard_normal()))
            .collect();
        let hv = flatten(&p.hvp(&params, &batch, &v).map_err(|e| e.to_string())?);
        let h = 1e-5;
        let shift = |sign: f64| -> Vec<Matrix> {
            params
                .iter()
                .zip(&v)
                .map(|(pt, vt)| pt.add(&vt.scale(sign * h)))
                .collect()
        };
        let (_, gp) = p.loss_and_gradient(&shift(1.0), &batch).map_err(|e| e.to_string())?;
        let (_, gm) = p.loss_and_gradient(&shift(-1.0), &batch).map_err(|e| e.to_string())?;
        let gp = flatten(&gp);
        let gm = flatten(&gm);
        let scale = hv.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for ((a, b), exact) in gp.iter().zip(&gm).zip(&hv) {
            let fd = (a - b) / (2.0 * h);
            if (fd - exact).abs() > 1e-5 * scale {
                return Err(format!("{}: hvp disagrees with gradient differences: {exact} vs {fd}", p.name()));
            }
        }
    }
    Ok(())
}

fn check_hvp_symmetry() -> Result<(), String> {
    let mut s = SeedStream::new(107, "selftest-sym");
    for p in bench_problems()? {
        let params = rand_params(p.as_ref(), &mut s);
        let batch = p.make_batch(2, 4);
        let draw = |s: &mut SeedStream| -> Vec<Matrix> {
            p.param_shapes()
                .iter()
                .map(|&(r, c)| Matrix::from_fn(r, c, |_, _| s.standard_normal()))
                .collect()
        };
        for _ in 0..5 {
            let u = draw(&mut s);
            let v = draw(&mut s);
            let hu = flatten(&p.hvp(&params, &batch, &u).map_err(|e| e.to_string())?);
            let hv = flatten(&p.hvp(&params, &batch, &v).map_err(|e| e.to_string())?);
            let uf = flatten(&u);
            let vf = flatten(&v);
            let a: f64 = uf.iter().zip(&hv).map(|(x, y)| x * y).sum();
            let b: f64 = vf.iter().zip(&hu).map(|(x, y)| x * y).sum();
            if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1e-12) {
                return Err(format!("{}: uᵀHv = {a} but vᵀHu = {b}", p.name()));
            }
        }
    }
    Ok(())
}

fn selftest_kinds() -> Vec<(GroupKind, (usize, usize))> {
    vec![
        (GroupKind::Diagonal, (5, 1)),
        (GroupKind::UpperTriangular, (4, 1)),
        (GroupKind::ScalingNormalization, (4, 3)),
        (GroupKind::ScalingWhitening, (3, 4)),
        (GroupKind::Kronecker { row: FactorKind::UpperTriangular, col: FactorKind::Diagonal }, (3, 3)),
    ]
}

fn check_group_closure() -> Result<(), String> {
    let mut s = SeedStream::new(109, "selftest-closure");
    for (kind, shape) in selftest_kinds() {
        let mut q = QFactor::init(kind, shape, 0.5).map_err(|e| e.to_string())?;
        for _ in 0..500 {
            let u = Matrix::from_fn(shape.0, shape.1, |_, _| s.standard_normal());
            let v = Matrix::from_fn(shape.0, shape.1, |_, _| s.standard_normal());
            let r = q.relative_gradient(&u, &v).map_err(|e| e.to_string())?;
            q.update_q(&r, 0.1).map_err(|e| e.to_string())?;
        }
        if !q.diagonals_positive() {
            return Err(format!("{kind:?}: a diagonal entry left the positive cone"));
        }
    }
    Ok(())
}

/// Criterion descent under one small normalized step, over random
/// instances of every group kind. With `flip_sign` the update ascends and
/// the check must fail; the selftest's mutation hook.
pub fn descent_check(flip_sign: bool) -> Result<(), String> {
    let mut s = SeedStream::new(113, "selftest-descent");
    for (kind, shape) in selftest_kinds() {
        for _ in 0..20 {
            let mut q = QFactor::init(kind, shape, 1.0).map_err(|e| e.to_string())?;
            for _ in 0..10 {
                let u = Matrix::from_fn(shape.0, shape.1, |_, _| s.standard_normal());
                let v = Matrix::from_fn(shape.0, shape.1, |_, _| s.standard_normal());
                let r = q.relative_gradient(&u, &v).map_err(|e| e.to_string())?;
                q.update_q(&r, 0.05).map_err(|e| e.to_string())?;
            }
            let u = Matrix::from_fn(shape.0, shape.1, |_, _| s.standard_normal());
            let v = Matrix::from_fn(shape.0, shape.1, |_, _| s.standard_normal());
            let before = dense_criterion(&q, &u, &v)?;
            let r = q.relative_gradient(&u, &v).map_err(|e| e.to_string())?;
            let r = if flip_sign { r.negated() } else { r };
            q.update_q(&r, 1e-3).map_err(|e| e.to_string())?;
            let after = dense_criterion(&q, &u, &v)?;
            if after > before * (1.0 + 1e-12) {
                return Err(format!(
                    "criterion-descent violated for {kind:?}: {before} -> {after}"
                ));
            }
        }
    }
    Ok(())
}

fn dense_criterion(q: &QFactor, u: &Matrix, v: &Matrix) -> Result<f64, String> {
    let qd = q.as_dense().map_err(|e| e.to_string())?;
    let qu = qd.mul_vec(&vec_mat(u));
    let qv = solve_lu(&qd.transpose(), &vec_mat(v)).map_err(|e| e.to_string())?;
    Ok(qu.dot(&qu) + qv.dot(&qv))
}

fn check_scalar_fixed_point() -> Result<(), String> {
    // h = 1, product-noise σ = √3: the learned scalar preconditioner heads
    // to 1/√(1+3) = 0.5. Quick version with a loose band.
    let h = Matrix::diag(&[1.0]);
    let b = Vector::zeros(1);
    let problem =
        crate::harness::make_noisy_quadratic(h, b, 3.0f64.sqrt(), 31).map_err(|e| e.to_string())?;
    let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
    config.group = GroupKind::Diagonal;
    config.mu = 1e-9;
    config.batch_size = 1;
    config.seed = 5;
    let mut state = OptimizerState::init(&problem, &config).map_err(|e| e.to_string())?;
    let total = 8000;
    let tail = 2000;
    let mut acc = 0.0;
    for i in 0..total {
        config.mu0 = 0.1 * (0.05f64).powf(i as f64 / total as f64);
        state.step(&problem, &config).map_err(|e| e.to_string())?;
        if i >= total - tail {
            let p = state.q_factors().unwrap()[0].dense_p().map_err(|e| e.to_string())?;
            acc += p.get(0, 0) / tail as f64;
        }
    }
    if !(0.45..=0.55).contains(&acc) {
        return Err(format!("scalar fixed point drifted: p = {acc}, want ≈ 0.5"));
    }
    Ok(())
}

fn check_kron_identity() -> Result<(), String> {
    let mut s = SeedStream::new(127, "selftest-kron");
    for m in 1..=4usize {
        for n in 1..=4usize {
            let q1 = Matrix::from_fn(m, m, |_, _| s.standard_normal());
            let q2 = Matrix::from_fn(n, n, |_, _| s.standard_normal());
            let t = Matrix::from_fn(m, n, |_, _| s.standard_normal());
            let lhs = kron(&q2, &q1).mul_vec(&vec_mat(&t));
            let rhs = vec_mat(&q1.matmul(&t).matmul(&q2.transpose()));
            let err = lhs
                .as_slice()
                .iter()
                .zip(rhs.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if err > 1e-12 {
                return Err(format!("kron vec identity broke at {m}x{n}: {err}"));
            }
            let back = kron_reshape(&vec_mat(&t), m, n).map_err(|e| e.to_string())?;
            if back != t {
                return Err(format!("vec/reshape round trip broke at {m}x{n}"));
            }
        }
    }
    Ok(())
}

fn check_checkpoint_roundtrip() -> Result<(), String> {
    let problem = make_rosenbrock().map_err(|e| e.to_string())?;
    let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
    config.group = GroupKind::UpperTriangular;
    config.q_init = 0.1;
    config.mu = 0.5;
    config.mu0 = 0.2;
    config.seed = 17;
    let mut state = OptimizerState::init(&problem, &config).map_err(|e| e.to_string())?;
    for _ in 0..5 {
        state.step(&problem, &config).map_err(|e| e.to_string())?;
    }
    let mut doc = KvDoc::new();
    state.to_kv(&mut doc);
    let parsed = KvDoc::parse(&doc.to_text()).map_err(|e| e.to_string())?;
    let mut restored = OptimizerState::from_kv(&parsed).map_err(|e| e.to_string())?;
    if restored != state {
        return Err("checkpoint did not restore the identical state".into());
    }
    for _ in 0..5 {
        state.step(&problem, &config).map_err(|e| e.to_string())?;
        restored.step(&problem, &config).map_err(|e| e.to_string())?;
    }
    let a: Vec<u64> = state.theta[0].as_slice().iter().map(|x| x.to_bits()).collect();
    let b: Vec<u64> = restored.theta[0].as_slice().iter().map(|x| x.to_bits()).collect();
    if a != b {
        return Err("resumed run diverged from the straight run".into());
    }
    Ok(())
}

fn check_rosenbrock_convergence() -> Result<(), String> {
    let problem = make_rosenbrock().map_err(|e| e.to_string())?;
    let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
    config.group = GroupKind::UpperTriangular;
    config.q_init = 0.1;
    config.mu = 0.5;
    config.mu0 = 0.2;
    config.seed = 1;
    let out = crate::harness::run_experiment(&problem, &config, 400).map_err(|e| e.to_string())?;
    if let Some(e) = out.abort {
        return Err(format!("run aborted: {e}"));
    }
    let best = out.trace.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    if best > 1e-6 {
        return Err(format!("best Rosenbrock loss after 400 iterations was {best}"));
    }
    Ok(())
}
