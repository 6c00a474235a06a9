//! Per-agent models: plain and correlated softmax policies, the multi-head
//! opponent model, the value baseline, and their losses.
//!
//! Input layouts (agent `i`):
//! - plain policy: `observation`
//! - correlated policy: `observation ⊕ onehot(a^(j)) for j ≠ i ascending`
//! - opponent model: `observation`, output = one logit block per opponent
//! - value function: `observation ⊕ onehot of previous opponent actions`
//!   (all zero at the first step)

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Choice, Policy};
use crate::nn::{batch_of, entropy_with_grad, log_softmax, one_hot, sample_index, softmax, Adam, Mlp};
use crate::rng::StreamRng;

/// The shape of the game as seen by one agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent: usize,
    pub obs_dim: usize,
    pub action_counts: Vec<usize>,
}

impl AgentSpec {
    pub fn new(agent: usize, obs_dim: usize, action_counts: Vec<usize>) -> Self {
        AgentSpec {
            agent,
            obs_dim,
            action_counts,
        }
    }

    pub fn own_actions(&self) -> usize {
        self.action_counts[self.agent]
    }

    pub fn opponents(&self) -> Vec<usize> {
        (0..self.action_counts.len()).filter(|&j| j != self.agent).collect()
    }

    pub fn opponent_counts(&self) -> Vec<usize> {
        self.opponents().into_iter().map(|j| self.action_counts[j]).collect()
    }

    /// Width of the concatenated opponent one-hot encoding.
    pub fn opponent_dim(&self) -> usize {
        self.opponent_counts().iter().sum()
    }

    pub fn encode_opponents(&self, opponents: &[usize]) -> Result<Vec<f64>> {
        let counts = self.opponent_counts();
        if opponents.len() != counts.len() {
            return Err(Error::Shape {
                context: "opponent actions",
                expected: counts.len(),
                got: opponents.len(),
            });
        }
        let mut v = Vec::with_capacity(self.opponent_dim());
        for (k, (&a, &n)) in opponents.iter().zip(&counts).enumerate() {
            if a >= n {
                return Err(Error::InvalidAction {
                    agent: self.opponents()[k],
                    step: None,
                    action: a,
                    limit: n,
                });
            }
            v.extend(one_hot(a, n));
        }
        Ok(v)
    }

    /// Own action and opponent actions of a joint action.
    pub fn split_joint(&self, joint: &[usize]) -> (usize, Vec<usize>) {
        let opp = joint
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != self.agent)
            .map(|(_, &a)| a)
            .collect();
        (joint[self.agent], opp)
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::Shape {
                context: "observation width",
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }
}

/// π^(i)(a|s) or π^(i)(a|s, a^(-i)) as a softmax over MLP logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub spec: AgentSpec,
    pub correlated: bool,
    pub net: Mlp,
}

impl PolicyModel {
    pub fn new(spec: AgentSpec, correlated: bool, hidden: usize, rng: &mut StreamRng) -> Self {
        let width = spec.obs_dim + if correlated { spec.opponent_dim() } else { 0 };
        let net = Mlp::with_hidden(width, hidden, spec.own_actions(), rng);
        PolicyModel { spec, correlated, net }
    }

    /// Network input for an observation and (for correlated policies) opponent actions.
    pub fn input(&self, obs: &[f64], opponents: Option<&[usize]>) -> Result<Vec<f64>> {
        self.spec.check_obs(obs)?;
        let mut x = obs.to_vec();
        if self.correlated {
            let opp = opponents.ok_or_else(|| Error::InvalidPolicy("correlated policy needs opponent actions".into()))?;
            x.extend(self.spec.encode_opponents(opp)?);
        }
        Ok(x)
    }

    pub fn probs(&self, obs: &[f64], opponents: Option<&[usize]>) -> Result<Vec<f64>> {
        Ok(softmax(&self.net.forward(&self.input(obs, opponents)?)?))
    }

    /// a ~ π(·|s, a^(-i)) together with its log-probability.
    pub fn sample_conditional(
        &self,
        obs: &[f64],
        opponents: Option<&[usize]>,
        rng: &mut StreamRng,
    ) -> Result<(usize, f64)> {
        let lp = log_softmax(&self.net.forward(&self.input(obs, opponents)?)?);
        let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let a = sample_index(&p, rng);
        Ok((a, lp[a]))
    }

    /// Mixture (1/K) Σ_k π(·|s, â_k), â_k ~ σ(·|s).
    pub fn marginal_probs(&self, obs: &[f64], model: &OpponentModel, k: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::Config("marginalization needs K ≥ 1".into()));
        }
        if !self.correlated {
            return self.probs(obs, None);
        }
        let mut acc = vec![0.0; self.spec.own_actions()];
        for _ in 0..k {
            let guess = model.sample(obs, rng)?;
            for (m, p) in acc.iter_mut().zip(self.probs(obs, Some(&guess))?) {
                *m += p / k as f64;
            }
        }
        Ok(acc)
    }

    pub fn marginal_action(&self, obs: &[f64], model: &OpponentModel, k: usize, rng: &mut StreamRng) -> Result<usize> {
        let p = self.marginal_probs(obs, model, k, rng)?;
        Ok(sample_index(&p, rng))
    }

    /// −mean(A log π(a|x)) − λ mean H(π(·|x)), its gradient and the mean entropy.
    pub fn loss_and_grad(&self, batch: &PgBatch, lambda: f64) -> Result<(f64, Vec<f64>, f64)> {
        let b = batch.actions.len();
        if b == 0 || batch.inputs.nrows() != b || batch.advantages.len() != b {
            return Err(Error::Empty("policy batch is empty or ragged"));
        }
        if batch.advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("advantage".into()));
        }
        let fwd = self.net.forward_batch(&batch.inputs)?;
        let n = self.spec.own_actions();
        let mut up = Array2::zeros((b, n));
        let (mut loss, mut ent) = (0.0, 0.0);
        for r in 0..b {
            let z: Vec<f64> = fwd.output.row(r).to_vec();
            let lp = log_softmax(&z);
            let (h, dh) = entropy_with_grad(&z);
            let a = batch.actions[r];
            let adv = batch.advantages[r];
            loss += -adv * lp[a] - lambda * h;
            ent += h;
            for k in 0..n {
                let ind = if k == a { 1.0 } else { 0.0 };
                up[[r, k]] = (-adv * (ind - lp[k].exp()) - lambda * dh[k]) / b as f64;
            }
        }
        let grad = self.net.backward_batch(&fwd, &up)?;
        Ok((loss / b as f64, grad, ent / b as f64))
    }

    /// Negative log-likelihood of recorded actions (behavior cloning).
    pub fn nll_and_grad(&self, inputs: &Array2<f64>, actions: &[usize]) -> Result<(f64, Vec<f64>)> {
        let batch = PgBatch {
            inputs: inputs.clone(),
            actions: actions.to_vec(),
            advantages: vec![1.0; actions.len()],
        };
        let (loss, grad, _) = self.loss_and_grad(&batch, 0.0)?;
        Ok((loss, grad))
    }
}

/// Inputs, taken actions and advantages for one policy update.
#[derive(Clone, Debug)]
pub struct PgBatch {
    pub inputs: Array2<f64>,
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgStats {
    pub loss: f64,
    pub entropy: f64,
}

/// One ascent step on E[log π · A] + λ H.
pub fn policy_gradient_step(policy: &mut PolicyModel, opt: &mut Adam, batch: &PgBatch, lambda: f64) -> Result<PgStats> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("λ must be non-negative, got {lambda}")));
    }
    let (loss, grad, entropy) = policy.loss_and_grad(batch, lambda)?;
    opt.apply_update(&mut policy.net, &grad)?;
    Ok(PgStats { loss, entropy })
}

/// σ^(i)(a^(-i)|s): one softmax head per opponent on a shared trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpponentModel {
    pub spec: AgentSpec,
    pub net: Mlp,
}

impl OpponentModel {
    pub fn new(spec: AgentSpec, hidden: usize, rng: &mut StreamRng) -> Self {
        let net = Mlp::with_hidden(spec.obs_dim, hidden, spec.opponent_dim(), rng);
        OpponentModel { spec, net }
    }

    fn heads(&self, logits: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut start = 0;
        for n in self.spec.opponent_counts() {
            out.push(logits[start..start + n].to_vec());
            start += n;
        }
        out
    }

    /// Per-opponent action distributions.
    pub fn probs(&self, obs: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.spec.check_obs(obs)?;
        Ok(self.heads(&self.net.forward(obs)?).iter().map(|z| softmax(z)).collect())
    }

    /// â^(-i) ~ σ(·|s), one draw per head.
    pub fn sample(&self, obs: &[f64], rng: &mut StreamRng) -> Result<Vec<usize>> {
        Ok(self.probs(obs)?.iter().map(|p| sample_index(p, rng)).collect())
    }

    /// Cross-entropy averaged over the batch and the heads.
    pub fn loss_and_grad(&self, inputs: &Array2<f64>, targets: &[Vec<usize>]) -> Result<(f64, Vec<f64>)> {
        let b = targets.len();
        if b == 0 {
            return Err(Error::Empty("opponent-model batch"));
        }
        if inputs.nrows() != b {
            return Err(Error::Shape {
                context: "opponent-model batch rows",
                expected: b,
                got: inputs.nrows(),
            });
        }
        let counts = self.spec.opponent_counts();
        let heads = counts.len() as f64;
        let fwd = self.net.forward_batch(inputs)?;
        let mut up = Array2::zeros(fwd.output.dim());
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            if target.len() != counts.len() {
                return Err(Error::Shape {
                    context: "opponent-model target",
                    expected: counts.len(),
                    got: target.len(),
                });
            }
            let row: Vec<f64> = fwd.output.row(r).to_vec();
            let mut start = 0;
            for (&y, &n) in target.iter().zip(&counts) {
                let lp = log_softmax(&row[start..start + n]);
                loss -= lp[y];
                for k in 0..n {
                    let ind = if k == y { 1.0 } else { 0.0 };
                    up[[r, start + k]] = (lp[k].exp() - ind) / (b as f64 * heads);
                }
                start += n;
            }
        }
        let grad = self.net.backward_batch(&fwd, &up)?;
        Ok((loss / (b as f64 * heads), grad))
    }

    pub fn fit_step(&mut self, opt: &mut Adam, inputs: &Array2<f64>, targets: &[Vec<usize>]) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(inputs, targets)?;
        opt.apply_update(&mut self.net, &grad)?;
        Ok(loss)
    }
}

/// V_φ^(i)(s, a^(-i)_{t-1}).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub spec: AgentSpec,
    pub net: Mlp,
}

impl ValueFunction {
    pub fn new(spec: AgentSpec, hidden: usize, rng: &mut StreamRng) -> Self {
        let net = Mlp::with_hidden(spec.obs_dim + spec.opponent_dim(), hidden, 1, rng);
        ValueFunction { spec, net }
    }

    pub fn input(&self, obs: &[f64], previous_opponents: Option<&[usize]>) -> Result<Vec<f64>> {
        self.spec.check_obs(obs)?;
        let mut x = obs.to_vec();
        match previous_opponents {
            Some(o) => x.extend(self.spec.encode_opponents(o)?),
            None => x.extend(std::iter::repeat_n(0.0, self.spec.opponent_dim())),
        }
        Ok(x)
    }

    pub fn values(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward_batch(inputs)?.output.column(0).to_vec())
    }

    /// mean (V − y)² and its gradient.
    pub fn loss_and_grad(&self, inputs: &Array2<f64>, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let b = targets.len();
        if b == 0 || inputs.nrows() != b {
            return Err(Error::Empty("value batch is empty or ragged"));
        }
        let fwd = self.net.forward_batch(inputs)?;
        let mut up = Array2::zeros((b, 1));
        let mut loss = 0.0;
        for (r, y) in targets.iter().enumerate() {
            let e = fwd.output[[r, 0]] - y;
            loss += e * e;
            up[[r, 0]] = 2.0 * e / b as f64;
        }
        Ok((loss / b as f64, self.net.backward_batch(&fwd, &up)?))
    }

    pub fn fit_step(&mut self, opt: &mut Adam, inputs: &Array2<f64>, targets: &[f64]) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(inputs, targets)?;
        opt.apply_update(&mut self.net, &grad)?;
        Ok(loss)
    }
}

/// Advantages and value targets for one episode segment.
///
/// With rewards `r_0..r_{T-1}`, baselines `b_t = V(s_t, a^(-i)_{t-1})` and a tail
/// value `v_T` (zero after absorption):
/// `A_t = Σ_{k=t}^{T-1} γ^{k-t} r_k + γ^{T-t} v_T − b_t`, target `A_t + b_t`.
pub fn advantage_estimates(rewards: &[f64], baselines: &[f64], tail_value: f64, gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != baselines.len() {
        return Err(Error::Shape {
            context: "baselines per reward",
            expected: rewards.len(),
            got: baselines.len(),
        });
    }
    let t = rewards.len();
    let mut targets = vec![0.0; t];
    let mut acc = tail_value;
    for k in (0..t).rev() {
        acc = rewards[k] + gamma * acc;
        targets[k] = acc;
    }
    let adv = targets.iter().zip(baselines).map(|(g, b)| g - b).collect();
    Ok((adv, targets))
}

/// Rescales to zero mean and unit variance; constant inputs map to zero.
pub fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Maximum-likelihood steps of a policy on (input, action) pairs.
pub fn fit_policy_bc(policy: &mut PolicyModel, opt: &mut Adam, inputs: &Array2<f64>, actions: &[usize]) -> Result<f64> {
    let (loss, grad) = policy.nll_and_grad(inputs, actions)?;
    opt.apply_update(&mut policy.net, &grad)?;
    Ok(loss)
}

/// Acts with one agent's own models: correlated policies imagine opponent
/// actions from their opponent model (K = 1) and condition on them.
pub struct Actor<'a> {
    pub policy: &'a PolicyModel,
    pub opponent_model: Option<&'a OpponentModel>,
}

impl Policy for Actor<'_> {
    fn act(&self, agent: usize, obs: &[f64], rng: &mut StreamRng) -> Result<Choice> {
        if agent != self.policy.spec.agent {
            return Err(Error::InvalidPolicy(format!(
                "actor of agent {} asked to act for agent {agent}",
                self.policy.spec.agent
            )));
        }
        if self.policy.correlated {
            let model = self
                .opponent_model
                .ok_or_else(|| Error::InvalidPolicy("correlated actor without opponent model".into()))?;
            let guess = model.sample(obs, rng)?;
            let (a, _) = self.policy.sample_conditional(obs, Some(&guess), rng)?;
            Ok(Choice {
                action: a,
                opponent_guess: Some(guess),
            })
        } else {
            Ok(Choice::plain(self.policy.sample_conditional(obs, None, rng)?.0))
        }
    }
}

/// Stacks policy inputs for a set of rows.
pub fn policy_inputs(policy: &PolicyModel, rows: &[(Vec<f64>, Option<Vec<usize>>)]) -> Result<Array2<f64>> {
    let xs = rows
        .iter()
        .map(|(o, opp)| policy.input(o, opp.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    batch_of(&xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference, relative_error};
    use crate::rng;
    use rand::Rng;

    fn spec() -> AgentSpec {
        AgentSpec::new(0, 3, vec![3, 2, 2])
    }

    fn biased_policy(bias: &[f64], correlated: bool) -> PolicyModel {
        let s = spec();
        let width = s.obs_dim + if correlated { s.opponent_dim() } else { 0 };
        let mut net = Mlp::zeros(width, 4, 3);
        let l = net.layout();
        net.params_mut()[l.b3..].copy_from_slice(bias);
        PolicyModel {
            spec: s,
            correlated,
            net,
        }
    }

    #[test]
    fn opponent_encoding_layout() {
        let s = spec();
        assert_eq!(s.opponents(), vec![1, 2]);
        assert_eq!(s.encode_opponents(&[1, 0]).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        assert!(s.encode_opponents(&[2, 0]).is_err());
        assert_eq!(s.split_joint(&[2, 1, 0]), (2, vec![1, 0]));
    }

    #[test]
    fn equal_logits_sample_uniformly() {
        let p = biased_policy(&[0.0; 3], true);
        let mut r = rng::seeded(1);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            counts[p.sample_conditional(&[0.2, 0.1, 0.0], Some(&[0, 1]), &mut r).unwrap().0] += 1;
        }
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 3.0).abs() < 3.0 * sd);
        }
    }

    #[test]
    fn dominant_logit_is_chosen() {
        let p = biased_policy(&[20.0, 0.0, 0.0], false);
        let mut r = rng::seeded(2);
        let hits = (0..10_000)
            .filter(|_| p.sample_conditional(&[0.0; 3], None, &mut r).unwrap().0 == 0)
            .count();
        assert!(hits >= 9_990);
    }

    #[test]
    fn conditional_ignoring_opponents_is_constant_and_equals_marginal() {
        let mut r = rng::seeded(3);
        let mut p = PolicyModel::new(spec(), true, 8, &mut r);
        // Zero the first-layer weights that read the opponent one-hot block.
        let l = p.net.layout();
        let width = p.net.input_dim();
        for h in 0..8 {
            for c in 3..width {
                p.net.params_mut()[l.w1 + h * width + c] = 0.0;
            }
        }
        let obs = [0.3, -0.2, 0.9];
        let base = p.probs(&obs, Some(&[0, 0])).unwrap();
        for opp in [[0, 1], [1, 0], [1, 1]] {
            assert_eq!(p.probs(&obs, Some(&opp)).unwrap(), base);
        }
        let m = OpponentModel::new(spec(), 8, &mut r);
        for k in [1, 5] {
            let mix = p.marginal_probs(&obs, &m, k, &mut r).unwrap();
            for (a, b) in mix.iter().zip(&base) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_mass_opponent_model_marginal_is_conditional() {
        let mut r = rng::seeded(4);
        let p = PolicyModel::new(spec(), true, 8, &mut r);
        let mut m = OpponentModel {
            spec: spec(),
            net: Mlp::zeros(3, 4, 4),
        };
        let l = m.net.layout();
        m.net.params_mut()[l.b3..].copy_from_slice(&[-40.0, 40.0, 40.0, -40.0]);
        let obs = [0.1, 0.2, 0.3];
        let mix = p.marginal_probs(&obs, &m, 3, &mut r).unwrap();
        let cond = p.probs(&obs, Some(&[1, 0])).unwrap();
        for (a, b) in mix.iter().zip(&cond) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_opponent_prediction_costs_ln_actions() {
        let s = AgentSpec::new(0, 2, vec![2, 5, 5]);
        let m = OpponentModel {
            spec: s,
            net: Mlp::zeros(2, 4, 10),
        };
        let x = batch_of(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let (loss, _) = m.loss_and_grad(&x, &[vec![0, 4], vec![2, 3]]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(m.loss_and_grad(&x, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn confident_correct_opponent_prediction_costs_nothing() {
        let s = AgentSpec::new(1, 1, vec![2, 2]);
        let mut m = OpponentModel {
            spec: s,
            net: Mlp::zeros(1, 2, 2),
        };
        let l = m.net.layout();
        m.net.params_mut()[l.b3..].copy_from_slice(&[20.0, -20.0]);
        let (loss, _) = m.loss_and_grad(&batch_of(&[vec![1.0]]).unwrap(), &[vec![0]]).unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = rng::seeded(5);
        let s = spec();
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let x = batch_of(&rows).unwrap();
        let coords = |n: usize| (0..n).step_by(3).collect::<Vec<_>>();

        let m = OpponentModel::new(s.clone(), 6, &mut r);
        let targets: Vec<Vec<usize>> = (0..6).map(|k| vec![k % 2, (k / 2) % 2]).collect();
        let (_, g) = m.loss_and_grad(&x, &targets).unwrap();
        let f = |p: &[f64]| {
            let mut mm = m.clone();
            mm.net.params_mut().copy_from_slice(p);
            mm.loss_and_grad(&x, &targets).unwrap().0
        };
        let cs = coords(g.len());
        for (c, n) in cs.iter().zip(finite_difference(f, m.net.params(), &cs, 1e-5)) {
            assert!(relative_error(g[*c], n) < 1e-4);
        }

        let p = PolicyModel::new(s.clone(), false, 6, &mut r);
        let batch = PgBatch {
            inputs: x.clone(),
            actions: vec![0, 1, 2, 0, 1, 2],
            advantages: vec![0.5, -1.0, 2.0, 0.1, -0.3, 1.2],
        };
        let (_, g, _) = p.loss_and_grad(&batch, 0.05).unwrap();
        let f = |q: &[f64]| {
            let mut pp = p.clone();
            pp.net.params_mut().copy_from_slice(q);
            pp.loss_and_grad(&batch, 0.05).unwrap().0
        };
        let cs = coords(g.len());
        for (c, n) in cs.iter().zip(finite_difference(f, p.net.params(), &cs, 1e-5)) {
            assert!(relative_error(g[*c], n) < 1e-4);
        }

        // One observation column plus a two-action opponent block gives width 3.
        let v = ValueFunction::new(AgentSpec::new(0, 1, vec![3, 2]), 6, &mut r);
        let vx = x.clone();
        let ys = [0.1, -0.4, 2.0, 0.0, 1.0, -1.5];
        let (_, g) = v.loss_and_grad(&vx, &ys).unwrap();
        let f = |q: &[f64]| {
            let mut vv = v.clone();
            vv.net.params_mut().copy_from_slice(q);
            vv.loss_and_grad(&vx, &ys).unwrap().0
        };
        let cs = coords(g.len());
        for (c, n) in cs.iter().zip(finite_difference(f, v.net.params(), &cs, 1e-5)) {
            assert!(relative_error(g[*c], n) < 1e-4);
        }
    }

    #[test]
    fn zero_advantage_without_entropy_leaves_policy() {
        let mut r = rng::seeded(6);
        let mut p = PolicyModel::new(spec(), false, 8, &mut r);
        let before = p.clone();
        let mut opt = Adam::for_model(&p.net, 3e-4);
        let batch = PgBatch {
            inputs: batch_of(&[vec![0.1, 0.2, 0.3]]).unwrap(),
            actions: vec![1],
            advantages: vec![0.0],
        };
        policy_gradient_step(&mut p, &mut opt, &batch, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn positive_advantage_raises_log_probability() {
        let mut r = rng::seeded(7);
        let mut p = PolicyModel::new(spec(), true, 8, &mut r);
        let obs = [0.4, -0.1, 0.2];
        let opp = [1, 0];
        let before = p.probs(&obs, Some(&opp)).unwrap()[2];
        let mut opt = Adam::for_model(&p.net, 1e-3);
        let batch = PgBatch {
            inputs: batch_of(&[p.input(&obs, Some(&opp)).unwrap()]).unwrap(),
            actions: vec![2],
            advantages: vec![1.0],
        };
        policy_gradient_step(&mut p, &mut opt, &batch, 0.0).unwrap();
        assert!(p.probs(&obs, Some(&opp)).unwrap()[2] > before);
    }

    #[test]
    fn nan_advantage_is_rejected() {
        let mut r = rng::seeded(8);
        let mut p = PolicyModel::new(spec(), false, 4, &mut r);
        let mut opt = Adam::for_model(&p.net, 1e-3);
        let batch = PgBatch {
            inputs: batch_of(&[vec![0.0; 3]]).unwrap(),
            actions: vec![0],
            advantages: vec![f64::NAN],
        };
        assert!(matches!(policy_gradient_step(&mut p, &mut opt, &batch, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn large_entropy_bonus_raises_entropy() {
        let mut p = biased_policy(&[3.0, 0.0, -1.0], false);
        let mut opt = Adam::for_model(&p.net, 1e-2);
        let obs = [1.0, 0.0, 0.0];
        let ent = |p: &PolicyModel| crate::oracle::entropy(&p.probs(&obs, None).unwrap());
        let start = ent(&p);
        let batch = PgBatch {
            inputs: batch_of(&[obs.to_vec()]).unwrap(),
            actions: vec![0],
            advantages: vec![0.0],
        };
        for _ in 0..200 {
            policy_gradient_step(&mut p, &mut opt, &batch, 10.0).unwrap();
        }
        assert!(ent(&p) > start);
    }

    #[test]
    fn advantages_follow_return_to_go() {
        let (a, _) = advantage_estimates(&[1.0, 0.0, 0.0], &[0.0; 3], 0.0, 1.0).unwrap();
        assert_eq!(a, vec![1.0, 0.0, 0.0]);
        let rewards = [0.5, -1.0, 2.0];
        let (_, truth) = advantage_estimates(&rewards, &[0.0; 3], 0.7, 0.9).unwrap();
        let (a, _) = advantage_estimates(&rewards, &truth, 0.7, 0.9).unwrap();
        assert!(a.iter().all(|x| x.abs() <= 1e-8));
    }

    #[test]
    fn advantages_match_brute_force_formula() {
        let mut r = rng::seeded(9);
        let t = 12;
        let rewards: Vec<f64> = (0..t).map(|_| r.random_range(-2.0..2.0)).collect();
        let base: Vec<f64> = (0..t).map(|_| r.random_range(-1.0..1.0)).collect();
        let (tail, gamma) = (0.37, 0.93);
        let (a, targets) = advantage_estimates(&rewards, &base, tail, gamma).unwrap();
        for s in 0..t {
            let mut g = 0.0;
            for k in s..t {
                g += gamma.powi((k - s) as i32) * rewards[k];
            }
            g += gamma.powi((t - s) as i32) * tail;
            assert!((a[s] - (g - base[s])).abs() < 1e-12);
            assert!((targets[s] - g).abs() < 1e-12);
        }
    }

    #[test]
    fn opponent_model_recovers_stochastic_table() {
        // Two observed states; the opponent plays fixed per-state distributions.
        let table = [[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]];
        let s = AgentSpec::new(0, 2, vec![2, 3]);
        let mut r = rng::seeded(10);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for k in 0..10_000 {
            let st = k % 2;
            rows.push(one_hot(st, 2));
            targets.push(vec![sample_index(&table[st], &mut r)]);
        }
        let mut m = OpponentModel::new(s, crate::nn::HIDDEN, &mut r);
        let mut opt = Adam::for_model(&m.net, 3e-4);
        for _ in 0..2_000 {
            let pick: Vec<usize> = (0..256).map(|_| r.random_range(0..rows.len())).collect();
            let x = batch_of(&pick.iter().map(|&k| rows[k].clone()).collect::<Vec<_>>()).unwrap();
            let y: Vec<Vec<usize>> = pick.iter().map(|&k| targets[k].clone()).collect();
            m.fit_step(&mut opt, &x, &y).unwrap();
        }
        for st in 0..2 {
            let p = &m.probs(&one_hot(st, 2)).unwrap()[0];
            assert!(crate::oracle::total_variation(p, &table[st]) < 0.05, "{p:?}");
        }
    }
}
