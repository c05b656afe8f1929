//! Forward noising, the `x0`-predicting denoiser, its training loss and
//! classifier-free-guided ancestral sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::encoder::init_weight;
use crate::error::{CardError, Result};
use crate::tensor::Matrix;

/// Linear beta schedule with cumulative products. Steps are 1-based;
/// `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 1);
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        assert!(betas.iter().all(|&b| b > 0.0 && b < 1.0), "betas must lie in (0, 1)");
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(CardError::StepOutOfRange {
                step: t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `(coef_x0, coef_xt, variance)` of the posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let coef_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        (coef_x0, coef_xt, var)
    }
}

/// `sqrt(ᾱ)·x0 + sqrt(1 − ᾱ)·eps` with a fresh standard normal `eps`.
pub fn noise_with_alpha_bar<R: Rng + ?Sized>(e0: &[f64], alpha_bar: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..e0.len()).map(|_| StandardNormal.sample(rng)).collect();
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let noised = e0.iter().zip(&eps).map(|(x, e)| a * x + b * e).collect();
    (noised, eps)
}

pub fn forward_noise<R: Rng + ?Sized>(
    e0: &[f64],
    step: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_step(step)?;
    Ok(noise_with_alpha_bar(e0, schedule.alpha_bar(step), rng))
}

/// `(1 + w)·cond − w·uncond`, element-wise.
pub fn cfg_combine<F: GuidanceFloat>(cond: &[F], uncond: &[F], w: F) -> Vec<F> {
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| F::guided(c, u, w))
        .collect()
}

/// Floats usable in the guidance combination.
pub trait GuidanceFloat: Copy {
    fn guided(cond: Self, uncond: Self, w: Self) -> Self;
}

impl GuidanceFloat for f32 {
    fn guided(cond: f32, uncond: f32, w: f32) -> f32 {
        (1.0 + w) * cond - w * uncond
    }
}

impl GuidanceFloat for f64 {
    fn guided(cond: f64, uncond: f64, w: f64) -> f64 {
        (1.0 + w) * cond - w * uncond
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn step_embedding(step: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = step as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Guidance slot of a denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub enum Guidance {
    Conditional(Vec<f64>),
    /// Use the learned null embedding.
    Null,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    pub noised: Vec<f64>,
    pub guidance: Guidance,
    pub step: usize,
}

/// Anything that maps a batch of `(x_t, guidance, t)` to `x0` estimates.
pub trait Denoiser {
    fn dim(&self) -> usize;
    /// The null-guidance vector substituted for unconditional calls.
    fn null_guidance(&self) -> Vec<f64>;
    fn denoise_batch(&self, noised: &Matrix, guidance: &Matrix, steps: &[usize]) -> Matrix;
}

/// Denoiser expressed on a [`Tape`], so its loss can be differentiated.
pub trait TapeDenoiser {
    fn forward(&self, tape: &mut Tape, noised: Var, guidance: Var, steps: &[usize]) -> Var;
}

/// Three-layer SiLU network over `[x_t, g, step_embedding(t)]`.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    d: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut R) -> Self {
        DenoiserNet {
            d,
            w1: store.add("denoiser.l1.weight", init_weight(rng, 3 * d, hidden)),
            b1: store.add("denoiser.l1.bias", Matrix::zeros(1, hidden)),
            w2: store.add("denoiser.l2.weight", init_weight(rng, hidden, hidden)),
            b2: store.add("denoiser.l2.bias", Matrix::zeros(1, hidden)),
            w3: store.add("denoiser.l3.weight", init_weight(rng, hidden, d)),
            b3: store.add("denoiser.l3.bias", Matrix::zeros(1, d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn step_matrix(&self, steps: &[usize]) -> Matrix {
        let rows: Vec<Vec<f64>> = steps.iter().map(|&t| step_embedding(t, self.d)).collect();
        Matrix::from_rows(&rows)
    }

}

impl TapeDenoiser for DenoiserNet {
    fn forward(&self, tape: &mut Tape, noised: Var, guidance: Var, steps: &[usize]) -> Var {
        let temb = tape.constant(self.step_matrix(steps));
        let x = tape.concat_cols(&[noised, guidance, temb]);
        let h = tape.linear(x, self.w1, self.b1);
        let h = tape.silu(h);
        let h = tape.linear(h, self.w2, self.b2);
        let h = tape.silu(h);
        tape.linear(h, self.w3, self.b3)
    }
}

/// Draws of one diffusion-loss evaluation, exposed for tests and logs.
#[derive(Debug, Clone, Default)]
pub struct LossDraws {
    pub steps: Vec<usize>,
    pub null_substitutions: usize,
}

/// Mean over the batch of `‖e0 − f(x_t, g, t)‖²` with `t ~ U{1..S}` and `g`
/// swapped for `null` with probability `cond_dropout_p`.
///
/// `targets` is `B×d`; `guidance` holds one `1×d` node per sample.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<N: TapeDenoiser + ?Sized, R: Rng + ?Sized>(
    tape: &mut Tape,
    net: &N,
    targets: Var,
    guidance: &[Var],
    null: Var,
    schedule: &NoiseSchedule,
    cond_dropout_p: f64,
    rng: &mut R,
) -> (Var, LossDraws) {
    let batch = guidance.len();
    assert!(batch > 0, "empty batch");
    let e0 = tape.value(targets).clone();
    let mut noise_rows = Vec::with_capacity(batch);
    let mut signal = Vec::with_capacity(batch);
    let mut guide = Vec::with_capacity(batch);
    let mut draws = LossDraws::default();
    for (i, &g) in guidance.iter().enumerate() {
        let t = rng.random_range(1..=schedule.steps());
        let drop = rng.random::<f64>() < cond_dropout_p;
        let alpha_bar = schedule.alpha_bar(t);
        let (_, eps) = noise_with_alpha_bar(e0.row(i), alpha_bar, rng);
        let b = (1.0 - alpha_bar).sqrt();
        noise_rows.push(eps.iter().map(|e| b * e).collect::<Vec<f64>>());
        signal.push(alpha_bar.sqrt());
        draws.steps.push(t);
        if drop {
            draws.null_substitutions += 1;
            guide.push(null);
        } else {
            guide.push(g);
        }
    }
    // x_t stays on the tape so undetached targets also receive its gradient
    let scaled = tape.scale_rows(targets, &signal);
    let noise = tape.constant(Matrix::from_rows(&noise_rows));
    let x = tape.add(scaled, noise);
    let loss = denoiser_mse(tape, net, targets, x, &guide, &draws.steps);
    (loss, draws)
}

/// Deterministic core of the loss given noised inputs, guidance and steps.
pub fn denoiser_mse<N: TapeDenoiser + ?Sized>(
    tape: &mut Tape,
    net: &N,
    targets: Var,
    x: Var,
    guidance: &[Var],
    steps: &[usize],
) -> Var {
    let batch = guidance.len();
    let g = if batch == 1 {
        guidance[0]
    } else {
        tape.concat_rows(guidance)
    };
    let pred = net.forward(tape, x, g, steps);
    let diff = tape.sub(targets, pred);
    let sq = tape.sum_squares(diff);
    tape.scale(sq, 1.0 / batch as f64)
}

/// Classifier-free guided ancestral sampling for a batch of guidance rows.
pub fn sample_batch<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    guidance: &Matrix,
    schedule: &NoiseSchedule,
    w: f64,
    rng: &mut R,
) -> Matrix {
    let (batch, d) = guidance.shape();
    assert_eq!(d, denoiser.dim());
    let null = denoiser.null_guidance();
    let mut both_guides = guidance.clone().into_data();
    for _ in 0..batch {
        both_guides.extend_from_slice(&null);
    }
    let both_guides = Matrix::from_vec(2 * batch, d, both_guides);

    let mut x = Matrix::from_vec(
        batch,
        d,
        (0..batch * d).map(|_| StandardNormal.sample(rng)).collect(),
    );
    for t in (1..=schedule.steps()).rev() {
        let mut doubled = x.clone().into_data();
        doubled.extend_from_slice(x.data());
        let doubled = Matrix::from_vec(2 * batch, d, doubled);
        let out = denoiser.denoise_batch(&doubled, &both_guides, &vec![t; 2 * batch]);
        let x0 = Matrix::from_vec(
            batch,
            d,
            cfg_combine(&out.data()[..batch * d], &out.data()[batch * d..], w),
        );
        if t == 1 {
            return x0;
        }
        let (c0, ct, var) = schedule.posterior(t);
        let sd = var.sqrt();
        let mut next = Matrix::zeros(batch, d);
        for ((n, &a), &b) in next.data_mut().iter_mut().zip(x0.data()).zip(x.data()) {
            let z: f64 = StandardNormal.sample(rng);
            *n = c0 * a + ct * b + sd * z;
        }
        x = next;
    }
    unreachable!("schedule has at least one step")
}

pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    guidance: &[f64],
    schedule: &NoiseSchedule,
    w: f64,
    rng: &mut R,
) -> Vec<f64> {
    sample_batch(denoiser, &Matrix::row_vector(guidance), schedule, w, rng).into_data()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(200) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn first_step_posterior_returns_x0() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02);
        let (c0, ct, var) = s.posterior(1);
        assert!((c0 - 1.0).abs() < 1e-9);
        assert!(ct.abs() < 1e-12);
        assert!(var.abs() < 1e-12);
    }

    #[test]
    fn out_of_range_step_errors() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02);
        let mut rng = seeded_rng(1, "noise");
        assert!(matches!(
            forward_noise(&[1.0], 0, &s, &mut rng),
            Err(CardError::StepOutOfRange { step: 0, max: 10 })
        ));
        assert!(forward_noise(&[1.0], 11, &s, &mut rng).is_err());
        assert!(forward_noise(&[1.0], 10, &s, &mut rng).is_ok());
    }

    #[test]
    fn unit_alpha_bar_is_identity_and_zero_is_pure_noise() {
        let mut rng = seeded_rng(1, "noise");
        let e0 = [0.25, -3.0, 7.5];
        let (x, _) = noise_with_alpha_bar(&e0, 1.0, &mut rng);
        assert_eq!(x, e0.to_vec());
        let (x, eps) = noise_with_alpha_bar(&e0, 0.0, &mut rng);
        assert_eq!(x, eps);
    }

    #[test]
    fn guidance_combination_identities() {
        assert_eq!(cfg_combine(&[2.0f64], &[1.0], 1.0), vec![3.0]);
        assert_eq!(cfg_combine(&[1.5f64, -2.0], &[9.0, 4.0], 0.0), vec![1.5, -2.0]);
        assert_eq!(cfg_combine(&[0.5f32, 0.25], &[0.5, 0.25], 3.0), vec![0.5, 0.25]);
    }

    #[test]
    fn step_embedding_is_bounded() {
        let e = step_embedding(137, 9);
        assert_eq!(e.len(), 9);
        assert_eq!(e[8], 0.0);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
    }

    /// Returns the same vector for every row, whatever the input.
    struct Constant(Vec<f64>);

    impl Denoiser for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn null_guidance(&self) -> Vec<f64> {
            vec![0.0; self.0.len()]
        }
        fn denoise_batch(&self, noised: &Matrix, _: &Matrix, _: &[usize]) -> Matrix {
            Matrix::from_rows(&vec![self.0.clone(); noised.rows()])
        }
    }

    /// Conditional calls return the guidance, unconditional ones return zero.
    struct Echo;

    impl Denoiser for Echo {
        fn dim(&self) -> usize {
            2
        }
        fn null_guidance(&self) -> Vec<f64> {
            vec![0.0, 0.0]
        }
        fn denoise_batch(&self, _: &Matrix, guidance: &Matrix, _: &[usize]) -> Matrix {
            guidance.clone()
        }
    }

    #[test]
    fn single_step_chain_returns_guided_estimate() {
        let s = NoiseSchedule::linear(1, 1e-4, 0.02);
        let out = sample(&Echo, &[1.0, -2.0], &s, 0.5, &mut seeded_rng(1, "sample"));
        assert_eq!(out, cfg_combine(&[1.0, -2.0], &[0.0, 0.0], 0.5));
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = NoiseSchedule::linear(30, 1e-4, 0.02);
        let d = Constant(vec![0.3, -0.1, 2.0]);
        let a = sample(&d, &[0.0; 3], &s, 1.0, &mut seeded_rng(9, "sample"));
        let b = sample(&d, &[0.0; 3], &s, 1.0, &mut seeded_rng(9, "sample"));
        assert_eq!(a, b);
        // an exact x0 predictor makes the final step land on it
        for (x, y) in a.iter().zip([0.3, -0.1, 2.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_with_fixed_draws_matches_hand_mse() {
        let mut rng = seeded_rng(2, "init");
        let mut store = ParamStore::new();
        let net = DenoiserNet::new(&mut store, 2, 4, &mut rng);
        let targets = Matrix::from_vec(2, 2, vec![1.0, 0.0, -0.5, 2.0]);
        let noised = Matrix::from_vec(2, 2, vec![0.1, 0.2, 0.3, -0.4]);
        let guid = [vec![0.5, 0.5], vec![-1.0, 0.25]];
        let steps = [3usize, 17];

        let mut tape = Tape::new(&store);
        let t = tape.constant(targets.clone());
        let g: Vec<Var> = guid.iter().map(|r| tape.constant(Matrix::row_vector(r))).collect();
        let x = tape.constant(noised.clone());
        let loss = denoiser_mse(&mut tape, &net, t, x, &g, &steps);
        let got = tape.scalar(loss);

        // brute force: run each row alone and average squared errors
        let mut total = 0.0;
        for i in 0..2 {
            let mut tape = Tape::new(&store);
            let x = tape.constant(Matrix::row_vector(noised.row(i)));
            let g = tape.constant(Matrix::row_vector(&guid[i]));
            let p = net.forward(&mut tape, x, g, &steps[i..i + 1]);
            let pred = tape.value(p).row(0).to_vec();
            total += pred
                .iter()
                .zip(targets.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        assert!((got - total / 2.0).abs() < 1e-12);
    }

    #[test]
    fn full_dropout_always_substitutes_null() {
        let mut rng = seeded_rng(2, "init");
        let mut store = ParamStore::new();
        let net = DenoiserNet::new(&mut store, 3, 4, &mut rng);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02);
        let mut tape = Tape::new(&store);
        let targets = tape.constant(Matrix::zeros(5, 3));
        let g: Vec<Var> = (0..5).map(|_| tape.constant(Matrix::filled(1, 3, 1.0))).collect();
        let null = tape.constant(Matrix::zeros(1, 3));
        let (_, draws) = diffusion_loss(&mut tape, &net, targets, &g, null, &schedule, 1.0, &mut rng);
        assert_eq!(draws.null_substitutions, 5);
        assert!(draws.steps.iter().all(|&t| (1..=10).contains(&t)));
    }

    /// Oracle that always answers with the clean targets.
    struct Perfect(Matrix);

    impl TapeDenoiser for Perfect {
        fn forward(&self, tape: &mut Tape, _: Var, _: Var, _: &[usize]) -> Var {
            tape.constant(self.0.clone())
        }
    }

    #[test]
    fn perfect_denoiser_gives_zero_loss() {
        let store = ParamStore::new();
        let clean = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let schedule = NoiseSchedule::linear(20, 1e-4, 0.02);
        let mut tape = Tape::new(&store);
        let targets = tape.constant(clean.clone());
        let g: Vec<Var> = (0..2).map(|_| tape.constant(Matrix::zeros(1, 2))).collect();
        let null = tape.constant(Matrix::zeros(1, 2));
        let mut rng = seeded_rng(4, "loss");
        let (loss, _) = diffusion_loss(&mut tape, &Perfect(clean), targets, &g, null, &schedule, 0.1, &mut rng);
        assert_eq!(tape.scalar(loss), 0.0);
    }
}
