//! Shared actor, twin critics, targets and the learned temperature.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nn::{Adam, Mlp, MlpCache, Real};
use super::SacError;

pub const ACTION_DIM: usize = 3;
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ActMode {
    /// `tanh(mean + std * xi)` with `xi ~ N(0, I)`.
    Sample,
    /// `tanh(mean)`.
    Mean,
}

/// Learning hyperparameters of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacHyper {
    pub gamma: f64,
    pub tau: f64,
    /// Polyak averaging is applied every this many updates.
    pub target_update_interval: u64,
    pub target_entropy: f64,
    pub initial_alpha: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_lr: f64,
    pub twin_q: bool,
}

impl Default for SacHyper {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            tau: 0.001,
            target_update_interval: 1,
            target_entropy: -8.0,
            initial_alpha: 1.0,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            entropy_lr: 1e-4,
            twin_q: true,
        }
    }
}

/// Minibatch in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<R> {
    pub size: usize,
    pub obs: Vec<R>,
    pub actions: Vec<R>,
    pub rewards: Vec<R>,
    pub next_obs: Vec<R>,
    /// 1 for terminal transitions, 0 otherwise.
    pub dones: Vec<R>,
}

/// Reparameterized policy outputs for a batch.
#[derive(Debug, Clone)]
pub struct PolicySample<R> {
    pub action: Vec<R>,
    pub logp: Vec<R>,
    pub log_std: Vec<R>,
    clamped: Vec<bool>,
    noise: Vec<R>,
    cache: MlpCache<R>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub mean_q: f64,
    pub mean_logp: f64,
}

fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

/// `log(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq<R: Real>(u: R) -> R {
    R::of(2.0) * (R::of(std::f64::consts::LN_2) - u - softplus(R::of(-2.0) * u))
}

/// `tanh(u)` kept strictly inside `(-1, 1)` at the working precision.
pub fn squash<R: Real>(u: R) -> R {
    let lim = R::one() - R::epsilon();
    u.tanh().max(-lim).min(lim)
}

fn concat<R: Real>(obs: &[R], act: &[R], batch: usize) -> Vec<R> {
    let d = obs.len() / batch;
    let mut out = Vec::with_capacity(batch * (d + ACTION_DIM));
    for b in 0..batch {
        out.extend_from_slice(&obs[b * d..(b + 1) * d]);
        out.extend_from_slice(&act[b * ACTION_DIM..(b + 1) * ACTION_DIM]);
    }
    out
}

fn mean<R: Real>(v: &[R]) -> f64 {
    v.iter().map(|x| x.f64()).sum::<f64>() / v.len().max(1) as f64
}

/// Shared-parameter soft actor-critic.
#[derive(Debug, Clone)]
pub struct Sac<R> {
    obs_dim: usize,
    pub actor: Mlp<R>,
    /// One critic, or two when twin Q is enabled.
    pub critics: Vec<Mlp<R>>,
    pub targets: Vec<Mlp<R>>,
    pub log_alpha: R,
    pub hyper: SacHyper,
    actor_opt: Adam<R>,
    critic_opts: Vec<Adam<R>>,
    alpha_opt: Adam<R>,
    updates: u64,
}

impl<R: Real> Sac<R> {
    pub fn new<G: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], hyper: SacHyper, rng: &mut G) -> Self {
        let actor_sizes: Vec<usize> = [obs_dim].iter().chain(hidden).chain(&[2 * ACTION_DIM]).copied().collect();
        let critic_sizes: Vec<usize> = [obs_dim + ACTION_DIM].iter().chain(hidden).chain(&[1]).copied().collect();
        let actor = Mlp::new(&actor_sizes, rng);
        let n_critics = if hyper.twin_q { 2 } else { 1 };
        let critics: Vec<Mlp<R>> = (0..n_critics).map(|_| Mlp::new(&critic_sizes, rng)).collect();
        Self::from_parts(obs_dim, actor, critics.clone(), critics, R::of(hyper.initial_alpha.ln()), hyper)
    }

    pub fn from_parts(
        obs_dim: usize,
        actor: Mlp<R>,
        critics: Vec<Mlp<R>>,
        targets: Vec<Mlp<R>>,
        log_alpha: R,
        hyper: SacHyper,
    ) -> Self {
        let actor_opt = Adam::new(actor.params.len(), hyper.actor_lr);
        let critic_opts = critics.iter().map(|c| Adam::new(c.params.len(), hyper.critic_lr)).collect();
        Self {
            obs_dim,
            actor,
            critics,
            targets,
            log_alpha,
            hyper,
            actor_opt,
            critic_opts,
            alpha_opt: Adam::new(1, hyper.entropy_lr),
            updates: 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn hidden(&self) -> &[usize] {
        let s = self.actor.sizes();
        &s[1..s.len() - 1]
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.f64().exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite()
            && self.critics.iter().chain(&self.targets).all(|n| n.is_finite())
            && self.log_alpha.is_finite()
    }

    /// Policy forward pass with externally supplied standard-normal noise.
    pub fn policy(&self, obs: &[R], batch: usize, noise: &[R]) -> PolicySample<R> {
        assert_eq!(noise.len(), batch * ACTION_DIM);
        let (out, cache) = self.actor.forward_cached(obs, batch);
        let half_ln_2pi = R::of(0.5 * (2.0 * std::f64::consts::PI).ln());
        let (lo, hi) = (R::of(LOG_STD_MIN), R::of(LOG_STD_MAX));
        let mut action = Vec::with_capacity(batch * ACTION_DIM);
        let mut log_std = Vec::with_capacity(batch * ACTION_DIM);
        let mut clamped = Vec::with_capacity(batch * ACTION_DIM);
        let mut logp = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = &out[b * 2 * ACTION_DIM..(b + 1) * 2 * ACTION_DIM];
            let mut lp = R::zero();
            for j in 0..ACTION_DIM {
                let raw = row[ACTION_DIM + j];
                let ls = raw.max(lo).min(hi);
                let xi = noise[b * ACTION_DIM + j];
                let u = row[j] + ls.exp() * xi;
                lp = lp - R::of(0.5) * xi * xi - ls - half_ln_2pi - log_one_minus_tanh_sq(u);
                action.push(squash(u));
                log_std.push(ls);
                clamped.push(raw < lo || raw > hi);
            }
            logp.push(lp);
        }
        PolicySample { action, logp, log_std, clamped, noise: noise.to_vec(), cache }
    }

    /// Actions for a batch of (already normalized) observations.
    pub fn act<G: Rng + ?Sized>(&self, obs: &[R], batch: usize, mode: ActMode, rng: &mut G) -> Result<Vec<R>, SacError> {
        if !self.actor.is_finite() {
            return Err(SacError::NonFinite("policy parameters".into()));
        }
        match mode {
            ActMode::Sample => {
                let noise = standard_normal(rng, batch * ACTION_DIM);
                Ok(self.policy(obs, batch, &noise).action)
            }
            ActMode::Mean => {
                let out = self.actor.forward(obs, batch);
                Ok(out
                    .chunks_exact(2 * ACTION_DIM)
                    .flat_map(|row| row[..ACTION_DIM].iter().map(|m| squash(*m)).collect::<Vec<_>>())
                    .collect())
            }
        }
    }

    fn min_q(nets: &[Mlp<R>], input: &[R], batch: usize) -> Vec<R> {
        let qs: Vec<Vec<R>> = nets.iter().map(|n| n.forward(input, batch)).collect();
        (0..batch).map(|b| qs.iter().map(|q| q[b]).fold(R::infinity(), R::min)).collect()
    }

    /// Soft Bellman targets `r + gamma (1 - done) (min Q'(s', a') - alpha log pi(a'|s'))`.
    pub fn critic_targets(&self, batch: &Batch<R>, next_noise: &[R]) -> Vec<R> {
        let n = batch.size;
        let next = self.policy(&batch.next_obs, n, next_noise);
        let q_next = Self::min_q(&self.targets, &concat(&batch.next_obs, &next.action, n), n);
        let alpha = self.log_alpha.exp();
        let gamma = R::of(self.hyper.gamma);
        (0..n)
            .map(|b| {
                let soft = q_next[b] - alpha * next.logp[b];
                batch.rewards[b] + gamma * (R::one() - batch.dones[b]) * soft
            })
            .collect()
    }

    /// Critic loss `1/2 sum_k mean_b (Q_k(s, a) - y)^2` and its gradient per critic.
    pub fn critic_loss(&self, batch: &Batch<R>, next_noise: &[R]) -> (f64, Vec<Vec<R>>, f64) {
        let n = batch.size;
        let y = self.critic_targets(batch, next_noise);
        let input = concat(&batch.obs, &batch.actions, n);
        let inv = R::one() / R::of(n as f64);
        let mut loss = 0.0;
        let mut q_sum = 0.0;
        let mut grads = Vec::with_capacity(self.critics.len());
        for net in &self.critics {
            let (q, cache) = net.forward_cached(&input, n);
            let d: Vec<R> = q.iter().zip(&y).map(|(q, y)| (*q - *y) * inv).collect();
            loss += 0.5 * q.iter().zip(&y).map(|(q, y)| (*q - *y).f64().powi(2)).sum::<f64>() / n as f64;
            q_sum += mean(&q);
            let mut g = vec![R::zero(); net.params.len()];
            net.backward(&cache, &d, Some(&mut g), false);
            grads.push(g);
        }
        (loss, grads, q_sum / self.critics.len() as f64)
    }

    /// Actor loss `mean_b (alpha log pi(a|s) - min_k Q_k(s, a))` with
    /// reparameterized `a`, its gradient, and the batch mean of `log pi`.
    pub fn actor_loss(&self, obs: &[R], batch: usize, noise: &[R]) -> (f64, Vec<R>, f64) {
        let ps = self.policy(obs, batch, noise);
        let input = concat(obs, &ps.action, batch);
        let fwd: Vec<(Vec<R>, MlpCache<R>)> = self.critics.iter().map(|c| c.forward_cached(&input, batch)).collect();
        let inv = R::one() / R::of(batch as f64);
        let alpha = self.log_alpha.exp();
        // dL/da through the elementwise-minimum critic
        let mut d_act = vec![R::zero(); batch * ACTION_DIM];
        let mut q_min = vec![R::infinity(); batch];
        let mut pick = vec![0usize; batch];
        for (k, (q, _)) in fwd.iter().enumerate() {
            for b in 0..batch {
                if q[b] < q_min[b] {
                    q_min[b] = q[b];
                    pick[b] = k;
                }
            }
        }
        let width = self.obs_dim + ACTION_DIM;
        for (k, (net, (_, cache))) in self.critics.iter().zip(&fwd).enumerate() {
            let d: Vec<R> = (0..batch).map(|b| if pick[b] == k { -inv } else { R::zero() }).collect();
            let dx = net.backward(cache, &d, None, true).expect("input gradient requested");
            for b in 0..batch {
                for j in 0..ACTION_DIM {
                    d_act[b * ACTION_DIM + j] = d_act[b * ACTION_DIM + j] + dx[b * width + self.obs_dim + j];
                }
            }
        }
        let two = R::of(2.0);
        let mut d_out = vec![R::zero(); batch * 2 * ACTION_DIM];
        for b in 0..batch {
            for j in 0..ACTION_DIM {
                let i = b * ACTION_DIM + j;
                let a = ps.action[i];
                let sd = ps.log_std[i].exp() * ps.noise[i];
                let da = d_act[i] * (R::one() - a * a);
                d_out[b * 2 * ACTION_DIM + j] = alpha * inv * two * a + da;
                if !ps.clamped[i] {
                    d_out[b * 2 * ACTION_DIM + ACTION_DIM + j] = alpha * inv * (two * a * sd - R::one()) + da * sd;
                }
            }
        }
        let mut g = vec![R::zero(); self.actor.params.len()];
        self.actor.backward(&ps.cache, &d_out, Some(&mut g), false);
        let loss = (0..batch).map(|b| (alpha * ps.logp[b] - q_min[b]).f64()).sum::<f64>() / batch as f64;
        (loss, g, mean(&ps.logp))
    }

    /// Temperature loss `-log_alpha (mean log pi + target_entropy)` and its
    /// derivative with respect to `log_alpha`.
    pub fn alpha_loss(&self, mean_logp: f64) -> (f64, f64) {
        let s = mean_logp + self.hyper.target_entropy;
        (-self.log_alpha.f64() * s, -s)
    }

    /// One gradient step on critics, actor and temperature, followed by the
    /// target update.
    pub fn update<G: Rng + ?Sized>(&mut self, batch: &Batch<R>, rng: &mut G) -> Result<UpdateStats, SacError> {
        let n = batch.size;
        let next_noise = standard_normal(rng, n * ACTION_DIM);
        let noise = standard_normal(rng, n * ACTION_DIM);

        let (critic_loss, critic_grads, mean_q) = self.critic_loss(batch, &next_noise);
        if !critic_loss.is_finite() {
            return Err(self.diagnose("critic loss", critic_loss, batch));
        }
        for ((net, opt), g) in self.critics.iter_mut().zip(&mut self.critic_opts).zip(&critic_grads) {
            opt.step(&mut net.params, g);
        }

        let (actor_loss, actor_grad, mean_logp) = self.actor_loss(&batch.obs, n, &noise);
        if !actor_loss.is_finite() {
            return Err(self.diagnose("actor loss", actor_loss, batch));
        }
        self.actor_opt.step(&mut self.actor.params, &actor_grad);

        let (alpha_loss, alpha_grad) = self.alpha_loss(mean_logp);
        let mut la = [self.log_alpha];
        self.alpha_opt.step(&mut la, &[R::of(alpha_grad)]);
        self.log_alpha = la[0];

        self.updates += 1;
        if self.updates % self.hyper.target_update_interval.max(1) == 0 {
            let tau = R::of(self.hyper.tau);
            for (t, c) in self.targets.iter_mut().zip(&self.critics) {
                t.polyak_from(c, tau);
            }
        }
        if !self.is_finite() {
            return Err(self.diagnose("parameters after update", f64::NAN, batch));
        }
        Ok(UpdateStats { critic_loss, actor_loss, alpha_loss, alpha: self.alpha(), mean_q, mean_logp })
    }

    fn diagnose(&self, what: &str, value: f64, batch: &Batch<R>) -> SacError {
        let finite = |v: &[R]| v.iter().all(|x| x.is_finite());
        SacError::NonFinite(format!(
            "{what} = {value} after {} updates; alpha = {}, actor finite = {}, critics finite = {}, \
             batch obs finite = {}, rewards finite = {}, next obs finite = {}",
            self.updates,
            self.alpha(),
            self.actor.is_finite(),
            self.critics.iter().all(|c| c.is_finite()),
            finite(&batch.obs),
            finite(&batch.rewards),
            finite(&batch.next_obs),
        ))
    }
}

pub fn standard_normal<R: Real, G: Rng + ?Sized>(rng: &mut G, n: usize) -> Vec<R> {
    (0..n).map(|_| R::of(rng.sample::<f64, _>(StandardNormal))).collect()
}
