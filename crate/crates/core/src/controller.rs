//! Policy over per-feature embedding choices, its reward baseline, and the
//! advantage actor-critic update.
//!
//! Every feature contributes one or more categorical *decisions*: a single
//! decision over `S*T + 1` actions in single-size mode (action 0 removes the
//! feature), or `T` decisions over `S + 1` row depths in multi-size mode.
//! Decisions are independent learned logit vectors.
//! The baseline mirrors that structure with its own parameters.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_into;
use crate::error::{NisError, Result};
use crate::params::{Gradients, Optimizer, ParamId, ParamStore};
use crate::search_space::{se_cost, FeatureChoice, GridLayout, MeChoice, SeChoice};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Se,
    Me,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(default = "default_policy_lr")]
    pub lr: f64,
    #[serde(default = "default_baseline_lr")]
    pub baseline_lr: f64,
    #[serde(default)]
    pub entropy_coef: f64,
}

fn default_policy_lr() -> f64 {
    1e-3
}

fn default_baseline_lr() -> f64 {
    1e-2
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lr: default_policy_lr(),
            baseline_lr: default_baseline_lr(),
            entropy_coef: 0.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.baseline_lr > 0.0) {
            return Err(NisError::config("controller learning rates must be positive"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(NisError::config("entropy_coef must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Decision {
    feature: usize,
    /// Column chunk for multi-size decisions.
    column: Option<usize>,
    logits: ParamId,
}

#[derive(Clone, Debug)]
pub struct ControllerPolicy {
    mode: SearchMode,
    layouts: Vec<GridLayout>,
    decisions: Vec<Decision>,
    store: ParamStore,
}

impl ControllerPolicy {
    /// Uniform policy (all logits zero) over the given feature grids.
    pub fn new(mode: SearchMode, layouts: Vec<GridLayout>) -> Result<Self> {
        if layouts.is_empty() {
            return Err(NisError::config("controller needs at least one feature"));
        }
        let mut store = ParamStore::new();
        let mut decisions = Vec::new();
        for (f, layout) in layouts.iter().enumerate() {
            match mode {
                SearchMode::Se => {
                    let id = store.add(format!("policy/{f}"), Tensor::zeros(&[layout.se_action_count()]))?;
                    decisions.push(Decision {
                        feature: f,
                        column: None,
                        logits: id,
                    });
                }
                SearchMode::Me => {
                    for t in 0..layout.num_col_chunks() {
                        let id = store.add(
                            format!("policy/{f}/{t}"),
                            Tensor::zeros(&[layout.num_row_chunks() + 1]),
                        )?;
                        decisions.push(Decision {
                            feature: f,
                            column: Some(t),
                            logits: id,
                        });
                    }
                }
            }
        }
        Ok(ControllerPolicy {
            mode,
            layouts,
            decisions,
            store,
        })
    }

    pub fn mode(&self) -> SearchMode {
        self.mode
    }

    pub fn layouts(&self) -> &[GridLayout] {
        &self.layouts
    }

    pub fn num_decisions(&self) -> usize {
        self.decisions.len()
    }

    pub fn action_counts(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| self.store.get(d.logits).len()).collect()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    pub fn logits(&self, decision: usize) -> &[f64] {
        self.store.get(self.decisions[decision].logits).data()
    }

    pub fn set_logits(&mut self, decision: usize, values: &[f64]) -> Result<()> {
        let t = self.store.get_mut(self.decisions[decision].logits);
        if t.len() != values.len() {
            return Err(NisError::contract(format!(
                "decision {decision} has {} actions, got {} logits",
                t.len(),
                values.len()
            )));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn probabilities(&self, decision: usize) -> Vec<f64> {
        let l = self.logits(decision);
        let mut p = vec![0.0; l.len()];
        softmax_into(l, &mut p);
        p
    }

    fn decisions_of(&self, feature: usize) -> impl Iterator<Item = usize> + '_ {
        self.decisions
            .iter()
            .enumerate()
            .filter(move |(_, d)| d.feature == feature)
            .map(|(i, _)| i)
    }

    fn draw<R: Rng + ?Sized>(&self, decision: usize, rng: &mut R) -> (usize, f64) {
        let p = self.probabilities(decision);
        let a = WeightedIndex::new(&p)
            .expect("softmax probabilities are positive")
            .sample(rng);
        (a, p[a].ln())
    }

    /// Samples one single-size choice for `feature`.
    pub fn sample_se_choice<R: Rng + ?Sized>(&self, feature: usize, rng: &mut R) -> Result<(SeChoice, f64)> {
        if self.mode != SearchMode::Se {
            return Err(NisError::contract("policy is in multi-size mode"));
        }
        let d = self.decisions_of(feature).next().ok_or_else(|| {
            NisError::contract(format!("no feature {feature}"))
        })?;
        let (a, lp) = self.draw(d, rng);
        Ok((SeChoice::from_action_index(a, &self.layouts[feature])?, lp))
    }

    /// Samples one row depth per column for `feature`.
    pub fn sample_me_choice<R: Rng + ?Sized>(&self, feature: usize, rng: &mut R) -> Result<(MeChoice, f64)> {
        if self.mode != SearchMode::Me {
            return Err(NisError::contract("policy is in single-size mode"));
        }
        if feature >= self.layouts.len() {
            return Err(NisError::contract(format!("no feature {feature}")));
        }
        let mut depths = Vec::new();
        let mut log_prob = 0.0;
        for d in self.decisions_of(feature).collect::<Vec<_>>() {
            let (a, lp) = self.draw(d, rng);
            depths.push(a);
            log_prob += lp;
        }
        Ok((MeChoice(depths), log_prob))
    }

    /// Draws every decision. Returns the flat action list and its log-probability.
    pub fn sample_actions<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<usize>, f64) {
        let mut actions = Vec::with_capacity(self.decisions.len());
        let mut log_prob = 0.0;
        for d in 0..self.decisions.len() {
            let (a, lp) = self.draw(d, rng);
            actions.push(a);
            log_prob += lp;
        }
        (actions, log_prob)
    }

    /// Sum of per-decision log-softmax terms for a flat action list.
    pub fn log_prob(&self, actions: &[usize]) -> f64 {
        assert_eq!(actions.len(), self.decisions.len(), "one action per decision");
        actions
            .iter()
            .enumerate()
            .map(|(d, &a)| self.probabilities(d)[a].ln())
            .sum()
    }

    /// Per-feature choices encoded by a flat action list.
    pub fn choices_for(&self, actions: &[usize]) -> Result<Vec<FeatureChoice>> {
        if actions.len() != self.decisions.len() {
            return Err(NisError::contract("one action per decision"));
        }
        let mut out = Vec::with_capacity(self.layouts.len());
        for (f, layout) in self.layouts.iter().enumerate() {
            let idx: Vec<usize> = self.decisions_of(f).collect();
            let choice = match self.mode {
                SearchMode::Se => FeatureChoice::Se(SeChoice::from_action_index(actions[idx[0]], layout)?),
                SearchMode::Me => FeatureChoice::Me(MeChoice(idx.iter().map(|&i| actions[i]).collect())),
            };
            choice.validate(layout)?;
            out.push(choice);
        }
        Ok(out)
    }

    /// Inverse of [`choices_for`](Self::choices_for).
    pub fn actions_for(&self, choices: &[FeatureChoice]) -> Result<Vec<usize>> {
        if choices.len() != self.layouts.len() {
            return Err(NisError::contract("one choice per feature"));
        }
        let mut actions = Vec::with_capacity(self.decisions.len());
        for (choice, layout) in choices.iter().zip(&self.layouts) {
            choice.validate(layout)?;
            match (self.mode, choice) {
                (SearchMode::Se, FeatureChoice::Se(c)) => actions.push(c.action_index(layout)),
                (SearchMode::Me, FeatureChoice::Me(c)) => actions.extend_from_slice(c.depths()),
                _ => return Err(NisError::contract("choice kind does not match policy mode")),
            }
        }
        Ok(actions)
    }

    /// Cost contribution of taking `action` at `decision`, used to break
    /// argmax ties.
    fn action_cost(&self, decision: usize, action: usize) -> u64 {
        let d = &self.decisions[decision];
        let layout = &self.layouts[d.feature];
        match d.column {
            None => se_cost(layout, &SeChoice::from_action_index(action, layout).expect("action in range")),
            Some(t) => (layout.col_splits()[t] * layout.row_bounds()[action]) as u64,
        }
    }

    /// Argmax action of every decision; exact ties go to the cheaper action,
    /// then the lower index.
    pub fn argmax_actions(&self) -> Vec<usize> {
        (0..self.decisions.len())
            .map(|d| {
                let l = self.logits(d);
                let best = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (0..l.len())
                    .filter(|&a| l[a] == best)
                    .min_by_key(|&a| (self.action_cost(d, a), a))
                    .expect("at least one action")
            })
            .collect()
    }

    /// Negative mean entropy over decisions (for logging).
    pub fn mean_entropy(&self) -> f64 {
        let n = self.decisions.len() as f64;
        (0..self.decisions.len())
            .map(|d| {
                self.probabilities(d)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n
    }
}

/// The converged architecture: argmax of every decision, as per-feature choices.
pub fn derive_final_architecture(policy: &ControllerPolicy) -> Vec<FeatureChoice> {
    policy
        .choices_for(&policy.argmax_actions())
        .expect("argmax actions are valid")
}

/// Reward predictor with the controller's shape: one learned scalar per
/// decision, no inputs.
#[derive(Clone, Debug)]
pub struct BaselineNet {
    values: Vec<ParamId>,
    store: ParamStore,
}

impl BaselineNet {
    pub fn new(policy: &ControllerPolicy) -> Result<Self> {
        let mut store = ParamStore::new();
        let values = (0..policy.num_decisions())
            .map(|i| store.add(format!("baseline/{i}"), Tensor::scalar(0.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BaselineNet { values, store })
    }

    /// Reward prediction for each decision.
    pub fn predict(&self) -> Vec<f64> {
        self.values.iter().map(|&id| self.store.get(id).data()[0]).collect()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }
}

/// One sampled architecture and what happened to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub actions: Vec<usize>,
    pub choices: Vec<FeatureChoice>,
    pub log_prob: f64,
    /// Baseline prediction per decision at sampling time.
    pub baseline: Vec<f64>,
    pub reward: f64,
}

/// Samples a full choice set and fills in everything but the reward.
pub fn sample_record<R: Rng + ?Sized>(
    policy: &ControllerPolicy,
    baseline: &BaselineNet,
    rng: &mut R,
) -> ChoiceRecord {
    let (actions, log_prob) = policy.sample_actions(rng);
    let choices = policy.choices_for(&actions).expect("sampled actions are valid");
    let predicted = baseline.predict();
    ChoiceRecord {
        actions,
        choices,
        log_prob,
        baseline: predicted,
        reward: f64::NAN,
    }
}

/// Summary of one controller update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub baseline_loss: f64,
}

/// One policy-gradient step on `-(R - V_i) log pi(a_i)` summed over decisions
/// and averaged over records, plus one squared-error regression step of the
/// baseline toward the realized rewards.
pub fn controller_update(
    policy: &mut ControllerPolicy,
    baseline: &mut BaselineNet,
    records: &[ChoiceRecord],
    config: &ControllerConfig,
) -> Result<UpdateStats> {
    if records.is_empty() {
        return Err(NisError::contract("controller update needs at least one record"));
    }
    if let Some(bad) = records.iter().find(|r| !r.reward.is_finite()) {
        return Err(NisError::Rejected(format!(
            "non-finite reward {} for actions {:?}",
            bad.reward, bad.actions
        )));
    }
    let n = records.len() as f64;
    let probs: Vec<Vec<f64>> = (0..policy.num_decisions()).map(|d| policy.probabilities(d)).collect();

    let mut pg = Gradients::zeros_like(&policy.store);
    let mut bg = Gradients::zeros_like(&baseline.store);
    let mut adv_total = 0.0;
    let mut baseline_loss = 0.0;
    for r in records {
        if r.actions.len() != policy.num_decisions() {
            return Err(NisError::contract("record does not match the policy's decisions"));
        }
        let predicted = baseline.predict();
        for (i, &a) in r.actions.iter().enumerate() {
            let advantage = r.reward - predicted[i];
            adv_total += advantage;
            // d(-log p_a)/d logits = p - onehot(a)
            let g = pg.get_mut(policy.decisions[i].logits).data_mut();
            for (k, gk) in g.iter_mut().enumerate() {
                let indicator = if k == a { 1.0 } else { 0.0 };
                *gk += advantage * (probs[i][k] - indicator) / n;
            }

            let err = predicted[i] - r.reward;
            baseline_loss += 0.5 * err * err / n;
            bg.get_mut(baseline.values[i]).data_mut()[0] += err / n;
        }
    }
    if config.entropy_coef > 0.0 {
        for (i, p) in probs.iter().enumerate() {
            let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
            let g = pg.get_mut(policy.decisions[i].logits).data_mut();
            for (k, gk) in g.iter_mut().enumerate() {
                if p[k] > 0.0 {
                    *gk += config.entropy_coef * p[k] * (p[k].ln() + h);
                }
            }
        }
    }
    let optimizer = Optimizer::default();
    policy.store.apply_gradients(&pg, config.lr, &optimizer)?;
    baseline.store.apply_gradients(&bg, config.baseline_lr, &optimizer)?;
    Ok(UpdateStats {
        mean_reward: records.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_advantage: adv_total / (n * policy.num_decisions() as f64),
        baseline_loss,
    })
}
