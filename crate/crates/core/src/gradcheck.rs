//! Central finite-difference checks of every analytic gradient.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contrastive::{mcl_loss, BankEntry, MclVariant, MemoryBank, Neighbor, Projection};
use crate::encoding::poisson_encode;
use crate::error::{PonError, Result};
use crate::losses::{rate_gradient_with, Criterion};
use crate::nn::{BatchSample, Method, MethodSpec, ModelConfig, Network, Toggles, TrainConfig};
use crate::poisson::{
    log_score_rate_derivative, normalize_scores, poisson_log_scores, ClassLabel, PoissonRate,
};

/// Denominator floor for gradients that are exactly zero. Central-difference
/// roundoff at `h = 1e-6` is about `ε/h ≈ 1e-10`, which this keeps an order of
/// magnitude under the default tolerance.
const ERROR_FLOOR: f64 = 1e-5;

/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub configurations: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// `∂H[k]/∂λ` used by the analytic side; replaceable to inject faults.
    pub score_derivative: fn(usize, f64) -> f64,
    /// Focal exponents drawn by the rate suites.
    pub gammas: &'static [f64],
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            configurations: 24,
            step: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            score_derivative: log_score_rate_derivative,
            gammas: &GAMMAS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub configurations: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ComponentReport> {
        self.components.iter().filter(|c| !c.passed)
    }
}

fn component(name: &str, errors: &[f64], tolerance: f64) -> ComponentReport {
    let max = errors.iter().copied().fold(0.0, f64::max);
    ComponentReport {
        component: name.to_string(),
        configurations: errors.len(),
        // NaN fails the comparison below as well
        max_relative_error: max,
        passed: errors.iter().all(|e| *e < tolerance),
    }
}

/// Runs every suite.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let components = vec![
        check_poisson_focal(options)?,
        check_rate_criterion("cross_entropy", options, |_| Criterion::CrossEntropy)?,
        check_rate_criterion("focal_loss", options, |gamma| Criterion::Focal { gamma })?,
        check_mcl(options)?,
        check_full_model(options)?,
    ];
    Ok(GradcheckReport {
        tolerance: options.tolerance,
        components,
    })
}

const GAMMAS: [f64; 3] = [0.0, 1.0, 2.0];
const CLASS_COUNTS: [usize; 3] = [3, 5, 8];

/// Random `(λ, K, y, γ)` draw from the checked domain.
fn rate_config(rng: &mut ChaCha8Rng, gammas: &[f64]) -> (f64, usize, usize, f64) {
    let k = *CLASS_COUNTS.choose(rng).expect("non-empty");
    (
        rng.random_range(0.1..10.0),
        k,
        rng.random_range(0..k),
        *gammas.choose(rng).expect("checked in run"),
    )
}

/// Value and analytic `∂L/∂λ` of a criterion on the Poisson head.
fn rate_loss(
    criterion: Criterion,
    lambda: f64,
    k: usize,
    label: ClassLabel,
    temperature: f64,
    score_derivative: fn(usize, f64) -> f64,
) -> Result<(f64, f64)> {
    let rate = PoissonRate::new(lambda)?;
    let target = poisson_encode(label, k, temperature)?;
    let loss = criterion.on_scores(&target, label, &poisson_log_scores(rate, k)?)?;
    Ok((
        loss.value,
        rate_gradient_with(rate, &loss.grad_scores, score_derivative),
    ))
}

fn rate_errors(
    options: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Option<(Criterion, f64, usize, ClassLabel, f64)>>,
) -> Result<Vec<f64>> {
    if options.gammas.is_empty() || options.gammas.iter().any(|g| g.is_nan() || *g < 0.0) {
        return Err(PonError::Config(
            "gradcheck gammas must be non-empty and >= 0".into(),
        ));
    }
    let h = options.step;
    let mut errors = Vec::with_capacity(options.configurations);
    while errors.len() < options.configurations {
        let Some((criterion, lambda, k, label, t)) = draw(rng)? else {
            continue;
        };
        let (_, analytic) = rate_loss(criterion, lambda, k, label, t, options.score_derivative)?;
        let exact = log_score_rate_derivative;
        let (up, _) = rate_loss(criterion, lambda + h, k, label, t, exact)?;
        let (down, _) = rate_loss(criterion, lambda - h, k, label, t, exact)?;
        errors.push(relative_error(analytic, (up - down) / (2.0 * h)));
    }
    Ok(errors)
}

/// `∂L_pfl/∂λ` over random `(λ, K, y, γ, t)`.
///
/// Draws where the focal weight sits within `1e-3` of its clamp at zero are
/// redrawn: the clamped weight is not differentiable there for `γ ≤ 1`.
pub fn check_poisson_focal(options: &GradcheckOptions) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let errors = rate_errors(options, &mut rng, |rng| {
        let (lambda, k, y, gamma) = rate_config(rng, options.gammas);
        let t = rng.random_range(0.05..2.0);
        let label = ClassLabel::new(y, k)?;
        let target = poisson_encode(label, k, t)?;
        let pred = normalize_scores(&poisson_log_scores(PoissonRate::new(lambda)?, k)?);
        if gamma > 0.0 && (target.get(label) - pred.get(label)).abs() < 1e-3 {
            return Ok(None);
        }
        Ok(Some((
            Criterion::PoissonFocal { gamma },
            lambda,
            k,
            label,
            t,
        )))
    })?;
    Ok(component("poisson_focal_loss", &errors, options.tolerance))
}

/// `∂L/∂λ` of a one-hot criterion evaluated under the Poisson head.
pub fn check_rate_criterion(
    name: &str,
    options: &GradcheckOptions,
    make: impl Fn(f64) -> Criterion,
) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(1));
    let errors = rate_errors(options, &mut rng, |rng| {
        let (lambda, k, y, gamma) = rate_config(rng, options.gammas);
        Ok(Some((make(gamma), lambda, k, ClassLabel::new(y, k)?, 1.0)))
    })?;
    Ok(component(name, &errors, options.tolerance))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok((p, _)) = Projection::normalize(v) {
            return p.as_slice().to_vec();
        }
    }
}

/// `∂L_mcl/∂z` through the normalization `z = u/‖u‖`, with a fixed contrast set.
pub fn check_mcl(options: &GradcheckOptions) -> Result<ComponentReport> {
    const DIM: usize = 8;
    const NUM_CLASSES: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(2));
    let h = options.step;
    let mut errors = Vec::new();
    for i in 0..options.configurations {
        let q = [1, 5, 20][i % 3];
        let variant = if i % 2 == 0 {
            MclVariant::Mass
        } else {
            MclVariant::LogMass
        };
        let label = ClassLabel::new(rng.random_range(0..NUM_CLASSES), NUM_CLASSES)?;
        let entries: Vec<BankEntry> = (0..q)
            .map(|_| -> Result<BankEntry> {
                Ok(BankEntry {
                    projection: Projection::new(random_unit(&mut rng, DIM))?,
                    label: ClassLabel::new(rng.random_range(0..NUM_CLASSES), NUM_CLASSES)?,
                })
            })
            .collect::<Result<_>>()?;
        let neighbors: Vec<Neighbor<'_>> = entries
            .iter()
            .enumerate()
            .map(|(id, e)| Neighbor {
                id: id as u64,
                projection: &e.projection,
                label: e.label,
                similarity: 0.0,
            })
            .collect();
        let u = random_unit(&mut rng, DIM);
        let loss_at = |v: Vec<f64>| -> Result<f64> {
            let (z, _) = Projection::normalize(v)?;
            Ok(mcl_loss(&z, label, &neighbors, variant).value)
        };
        // at unit norm the raw-space gradient equals the tangent gradient
        let analytic =
            mcl_loss(&Projection::new(u.clone())?, label, &neighbors, variant).grad_query;
        for j in 0..DIM {
            let mut up = u.clone();
            up[j] += h;
            let mut down = u.clone();
            down[j] -= h;
            let numeric = (loss_at(up)? - loss_at(down)?) / (2.0 * h);
            errors.push(relative_error(analytic[j], numeric));
        }
    }
    let mut report = component("mcl_loss", &errors, options.tolerance);
    report.configurations = options.configurations;
    Ok(report)
}

fn raw_projection_norm(network: &Network, x: &[f64]) -> f64 {
    let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|a| a.max(0.0)).collect() };
    let features = network
        .params
        .encoder
        .iter()
        .fold(x.to_vec(), |acts, layer| relu(layer.forward(&acts)));
    let [first, second] = &network.params.projector;
    second
        .forward(&relu(first.forward(&features)))
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Every PON toggle combination followed by the baselines.
fn full_model_methods() -> Vec<MethodSpec> {
    let mut specs: Vec<MethodSpec> = (0..16u8)
        .map(|bits| {
            MethodSpec::pon(Toggles {
                poisson_head: bits & 1 != 0,
                poisson_encoding: bits & 2 != 0,
                pfl: bits & 4 != 0,
                mcl: bits & 8 != 0,
            })
        })
        .collect();
    specs.extend(
        [
            Method::Focal,
            Method::Emd,
            Method::Ordinal,
            Method::Softlabel,
        ]
        .into_iter()
        .map(MethodSpec::new),
    );
    specs
}

/// Every parameter of a tiny network (2-4 encoder, `K = 3`, `d_p = 2`, batch 2)
/// against a populated memory bank.
pub fn check_full_model(options: &GradcheckOptions) -> Result<ComponentReport> {
    const NUM_CLASSES: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(3));
    let model = ModelConfig {
        encoder_widths: vec![4],
        projector_hidden: 3,
        projection_dim: 2,
        num_classes: Some(NUM_CLASSES),
    };
    let methods = full_model_methods();
    let configurations = options.configurations.max(methods.len());
    let h = options.step;
    let mut errors = Vec::new();
    for i in 0..configurations {
        let method = methods[i % methods.len()];
        let train = TrainConfig {
            gamma: [0.0, 2.0][i % 2],
            temperature: rng.random_range(0.05..1.0),
            q: rng.random_range(1..=6),
            mcl_variant: if i % 3 == 0 {
                MclVariant::LogMass
            } else {
                MclVariant::Mass
            },
            ..TrainConfig::default()
        };
        let objective = method.objective(&train);
        let mut bank = MemoryBank::new(16);
        for id in 10..18u64 {
            let label = ClassLabel::new(rng.random_range(0..NUM_CLASSES), NUM_CLASSES)?;
            bank.update(id, Projection::new(random_unit(&mut rng, 2))?, label)?;
        }
        let features: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<ClassLabel> = (0..2)
            .map(|_| ClassLabel::new(rng.random_range(0..NUM_CLASSES), NUM_CLASSES))
            .collect::<Result<_>>()?;
        // normalization is singular at a zero projector output
        let mut network = loop {
            let candidate = Network::init(2, &model, objective.head, NUM_CLASSES, &mut rng)?;
            if features
                .iter()
                .all(|x| raw_projection_norm(&candidate, x) > 1e-3)
            {
                break candidate;
            }
        };
        let batch: Vec<BatchSample<'_>> = features
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(id, (x, &label))| BatchSample {
                id: id as u64,
                features: x,
                label,
            })
            .collect();

        let analytic = network
            .backward_with(&batch, &bank, &objective, options.score_derivative)?
            .grads
            .to_flat();
        let base = network.params.to_flat();
        for j in 0..base.len() {
            let mut probe = base.clone();
            probe[j] = base[j] + h;
            network.params.set_flat(&probe)?;
            let up = network.backward(&batch, &bank, &objective)?.total;
            probe[j] = base[j] - h;
            network.params.set_flat(&probe)?;
            let down = network.backward(&batch, &bank, &objective)?.total;
            errors.push(relative_error(analytic[j], (up - down) / (2.0 * h)));
        }
    }
    let mut report = component("full_model", &errors, options.tolerance);
    report.configurations = configurations;
    Ok(report)
}
