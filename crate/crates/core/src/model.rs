//! State space, β parameterization and the deterministic transition math of
//! the additive coupled HMM.
//!
//! Every chain's transition matrix at time `t` is a row-wise softmax of
//!
//! ```text
//! U[target] = β₀[target] + Σ_{source ≠ target, prev[source] = k ≠ baseline} β_k[target ← source]
//! ```
//!
//! Each β row sums to zero; only its first `K − 1` entries are free.

use serde::{Deserialize, Serialize};

use crate::error::{ChmmError, Result};

/// Latent or observed state index.
pub type State = u8;

/// The application labels: one chain per body site.
pub const DEFAULT_SITES: [&str; 4] = ["nares", "skin", "throat", "wound"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    num_states: usize,
    baseline: usize,
    chain_labels: Vec<String>,
}

impl StateSpace {
    pub fn new(chain_labels: Vec<String>, num_states: usize, baseline: usize) -> Result<Self> {
        if chain_labels.is_empty() {
            return Err(ChmmError::InvalidParameter(
                "state space needs at least one chain".into(),
            ));
        }
        if !(2..=State::MAX as usize).contains(&num_states) {
            return Err(ChmmError::InvalidParameter(format!(
                "number of states must be in 2..=255, got {num_states}"
            )));
        }
        if baseline >= num_states {
            return Err(ChmmError::InvalidParameter(format!(
                "baseline state {baseline} out of range for {num_states} states"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for label in &chain_labels {
            if !seen.insert(label.as_str()) {
                return Err(ChmmError::InvalidParameter(format!(
                    "duplicate chain label `{label}`"
                )));
            }
        }
        Ok(Self {
            num_states,
            baseline,
            chain_labels,
        })
    }

    /// Four body sites, clear (0) / colonized (1), baseline = clear.
    pub fn application() -> Self {
        Self::new(DEFAULT_SITES.iter().map(|s| s.to_string()).collect(), 2, 0)
            .expect("application profile is valid")
    }

    /// Chains labelled `c0, c1, ...`.
    pub fn anonymous(num_chains: usize, num_states: usize, baseline: usize) -> Result<Self> {
        Self::new(
            (0..num_chains).map(|c| format!("c{c}")).collect(),
            num_states,
            baseline,
        )
    }

    pub fn num_chains(&self) -> usize {
        self.chain_labels.len()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn baseline(&self) -> usize {
        self.baseline
    }

    pub fn chain_labels(&self) -> &[String] {
        &self.chain_labels
    }

    pub fn chain_index(&self, label: &str) -> Option<usize> {
        self.chain_labels.iter().position(|l| l == label)
    }

    /// Non-baseline states in ascending order.
    pub fn active_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_states).filter(move |&k| k != self.baseline)
    }

    /// For `K = 2`, the single non-baseline ("colonized") state.
    pub fn colonized_state(&self) -> Result<usize> {
        if self.num_states != 2 {
            return Err(ChmmError::UnsupportedDimension(format!(
                "colonized state is only defined for K = 2, got K = {}",
                self.num_states
            )));
        }
        Ok(1 - self.baseline)
    }

    /// `K^C`, or `None` on overflow.
    pub fn joint_size(&self) -> Option<u128> {
        (self.num_states as u128).checked_pow(self.num_chains() as u32)
    }

    /// Mixed-radix code of a joint state, chain 0 least significant.
    pub fn encode(&self, states: &[State]) -> usize {
        states
            .iter()
            .rev()
            .fold(0usize, |acc, &s| acc * self.num_states + s as usize)
    }

    pub fn decode(&self, mut code: usize) -> Vec<State> {
        let mut out = Vec::with_capacity(self.num_chains());
        for _ in 0..self.num_chains() {
            out.push((code % self.num_states) as State);
            code /= self.num_states;
        }
        out
    }

    pub fn validate_states(&self, states: &[State]) -> Result<()> {
        if states.len() != self.num_chains() {
            return Err(ChmmError::InvalidParameter(format!(
                "expected {} chain states, got {}",
                self.num_chains(),
                states.len()
            )));
        }
        for (chain, &s) in states.iter().enumerate() {
            if s as usize >= self.num_states {
                return Err(ChmmError::InvalidState {
                    chain,
                    state: s as usize,
                    num_states: self.num_states,
                });
            }
        }
        Ok(())
    }
}

/// One sum-to-zero β row.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaRow {
    full: Vec<f64>,
}

impl BetaRow {
    pub fn free(&self) -> &[f64] {
        &self.full[..self.full.len() - 1]
    }

    pub fn full(&self) -> &[f64] {
        &self.full
    }
}

/// Closes a row of `K − 1` free parameters with its negated sum.
pub fn complete_beta_row(free: &[f64]) -> Result<BetaRow> {
    if free.is_empty() {
        return Err(ChmmError::InvalidParameter(
            "a β row needs at least one free parameter".into(),
        ));
    }
    if let Some(bad) = free.iter().find(|v| !v.is_finite()) {
        return Err(ChmmError::InvalidParameter(format!(
            "non-finite β value {bad}"
        )));
    }
    let mut full = free.to_vec();
    full.push(-free.iter().sum::<f64>());
    Ok(BetaRow { full })
}

/// Free β parameters, stored per target chain as one contiguous block.
///
/// Block layout for target `ĉ`: the intercept (K rows × K−1 free values),
/// then for every source `c ≠ ĉ` in ascending order and every non-baseline
/// state `k` in ascending order, one K × (K−1) interaction matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    num_chains: usize,
    num_states: usize,
    baseline: usize,
    blocks: Vec<Vec<f64>>,
}

impl BetaParams {
    pub fn zeros(space: &StateSpace) -> Self {
        let len = Self::block_len(space.num_chains(), space.num_states());
        Self {
            num_chains: space.num_chains(),
            num_states: space.num_states(),
            baseline: space.baseline(),
            blocks: vec![vec![0.0; len]; space.num_chains()],
        }
    }

    pub fn from_blocks(space: &StateSpace, blocks: Vec<Vec<f64>>) -> Result<Self> {
        let mut beta = Self::zeros(space);
        if blocks.len() != beta.num_chains {
            return Err(ChmmError::InvalidParameter(format!(
                "expected {} β blocks, got {}",
                beta.num_chains,
                blocks.len()
            )));
        }
        for (c, block) in blocks.into_iter().enumerate() {
            beta.set_block(c, block)?;
        }
        Ok(beta)
    }

    /// Free parameters per target chain: `K(K−1)·(1 + (C−1)(K−1))`.
    pub fn block_len(num_chains: usize, num_states: usize) -> usize {
        let matrix = num_states * (num_states - 1);
        matrix * (1 + (num_chains - 1) * (num_states - 1))
    }

    /// `C·K·(K−1) + C·(C−1)·(K−1)·K·(K−1)`.
    pub fn free_param_count(&self) -> usize {
        self.num_chains * Self::block_len(self.num_chains, self.num_states)
    }

    pub fn num_chains(&self) -> usize {
        self.num_chains
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn baseline(&self) -> usize {
        self.baseline
    }

    pub fn block(&self, target: usize) -> &[f64] {
        &self.blocks[target]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn set_block(&mut self, target: usize, block: Vec<f64>) -> Result<()> {
        let expected = Self::block_len(self.num_chains, self.num_states);
        if block.len() != expected {
            return Err(ChmmError::InvalidParameter(format!(
                "β block for chain {target} has {} values, expected {expected}",
                block.len()
            )));
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(ChmmError::InvalidParameter(format!(
                "non-finite value in β block for chain {target}"
            )));
        }
        self.blocks[target] = block;
        Ok(())
    }

    fn matrix_len(&self) -> usize {
        self.num_states * (self.num_states - 1)
    }

    /// Number of leading block entries that belong to the intercept.
    pub fn intercept_len(&self) -> usize {
        self.matrix_len()
    }

    fn active_rank(&self, k: usize) -> usize {
        if k > self.baseline {
            k - 1
        } else {
            k
        }
    }

    fn interaction_offset(&self, target: usize, source: usize, k: usize) -> usize {
        debug_assert!(source != target && k != self.baseline);
        let source_rank = if source > target { source - 1 } else { source };
        let per_source = (self.num_states - 1) * self.matrix_len();
        self.matrix_len() + source_rank * per_source + self.active_rank(k) * self.matrix_len()
    }

    fn check_interaction(&self, target: usize, source: usize, k: usize) -> Result<()> {
        if target >= self.num_chains || source >= self.num_chains || source == target {
            return Err(ChmmError::InvalidParameter(format!(
                "no interaction {target} <- {source}"
            )));
        }
        if k >= self.num_states || k == self.baseline {
            return Err(ChmmError::InvalidParameter(format!(
                "interaction state {k} must be a non-baseline state"
            )));
        }
        Ok(())
    }

    fn row_at(&self, target: usize, offset: usize, row: usize) -> BetaRow {
        let w = self.num_states - 1;
        let start = offset + row * w;
        complete_beta_row(&self.blocks[target][start..start + w]).expect("stored β is finite")
    }

    pub fn intercept_row(&self, target: usize, row: usize) -> BetaRow {
        self.row_at(target, 0, row)
    }

    pub fn interaction_row(
        &self,
        target: usize,
        source: usize,
        k: usize,
        row: usize,
    ) -> Result<BetaRow> {
        self.check_interaction(target, source, k)?;
        Ok(self.row_at(target, self.interaction_offset(target, source, k), row))
    }

    pub fn set_intercept_row(&mut self, target: usize, row: usize, free: &[f64]) -> Result<()> {
        self.write_row(target, 0, row, free)
    }

    pub fn set_interaction_row(
        &mut self,
        target: usize,
        source: usize,
        k: usize,
        row: usize,
        free: &[f64],
    ) -> Result<()> {
        self.check_interaction(target, source, k)?;
        let offset = self.interaction_offset(target, source, k);
        self.write_row(target, offset, row, free)
    }

    fn write_row(&mut self, target: usize, offset: usize, row: usize, free: &[f64]) -> Result<()> {
        let w = self.num_states - 1;
        if free.len() != w || row >= self.num_states {
            return Err(ChmmError::InvalidParameter(format!(
                "β row {row} needs {w} free values, got {}",
                free.len()
            )));
        }
        complete_beta_row(free)?;
        let start = offset + row * w;
        self.blocks[target][start..start + w].copy_from_slice(free);
        Ok(())
    }

    /// Writes the full (sum-zero) matrix stored at `offset` of `block`
    /// into `out`, adding to what is there.
    fn accumulate_matrix(&self, block: &[f64], offset: usize, out: &mut [f64]) {
        let k = self.num_states;
        let w = k - 1;
        for row in 0..k {
            let free = &block[offset + row * w..offset + (row + 1) * w];
            let mut sum = 0.0;
            for (j, &v) in free.iter().enumerate() {
                out[row * k + j] += v;
                sum += v;
            }
            out[row * k + w] -= sum;
        }
    }

    /// Unnormalized transition matrix `U` (row-major K×K) for `target`,
    /// given every chain's state at the previous step. The target's own
    /// entry in `prev_states` is ignored.
    pub fn unnormalized(&self, target: usize, prev_states: &[State]) -> Result<Vec<f64>> {
        self.check_prev(target, prev_states)?;
        Ok(self.unnormalized_with(&self.blocks[target], target, prev_states))
    }

    /// Same as [`unnormalized`](Self::unnormalized) but with an arbitrary
    /// parameter block for `target` (used for MH proposals).
    pub(crate) fn unnormalized_with(
        &self,
        block: &[f64],
        target: usize,
        prev_states: &[State],
    ) -> Vec<f64> {
        let k = self.num_states;
        let mut u = vec![0.0; k * k];
        self.accumulate_matrix(block, 0, &mut u);
        for (source, &s) in prev_states.iter().enumerate() {
            let s = s as usize;
            if source == target || s == self.baseline {
                continue;
            }
            self.accumulate_matrix(block, self.interaction_offset(target, source, s), &mut u);
        }
        u
    }

    fn check_prev(&self, target: usize, prev_states: &[State]) -> Result<()> {
        if target >= self.num_chains {
            return Err(ChmmError::InvalidParameter(format!(
                "target chain {target} out of range"
            )));
        }
        if prev_states.len() != self.num_chains {
            return Err(ChmmError::InvalidParameter(format!(
                "expected {} previous states, got {}",
                self.num_chains,
                prev_states.len()
            )));
        }
        for (chain, &s) in prev_states.iter().enumerate() {
            if s as usize >= self.num_states {
                return Err(ChmmError::InvalidState {
                    chain,
                    state: s as usize,
                    num_states: self.num_states,
                });
            }
        }
        Ok(())
    }
}

/// Row-stochastic K×K matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    num_states: usize,
    probs: Vec<f64>,
}

impl TransitionMatrix {
    /// Row-wise softmax with max subtraction.
    pub fn from_unnormalized(num_states: usize, u: &[f64]) -> Self {
        let mut probs = u.to_vec();
        for row in probs.chunks_mut(num_states) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Self { num_states, probs }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.probs[from * self.num_states + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.probs[from * self.num_states..(from + 1) * self.num_states]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// `T = row-softmax(U)` for `target` given every chain's previous state.
pub fn build_transition(
    beta: &BetaParams,
    target: usize,
    prev_states: &[State],
) -> Result<TransitionMatrix> {
    let u = beta.unnormalized(target, prev_states)?;
    Ok(TransitionMatrix::from_unnormalized(beta.num_states, &u))
}

/// Transition log-odds for `K = 2`, where `logit T(i, j) = 2·U(i, j)`.
pub fn transition_logodds(
    beta: &BetaParams,
    target: usize,
    prev_states: &[State],
) -> Result<Vec<f64>> {
    if beta.num_states != 2 {
        return Err(ChmmError::UnsupportedDimension(format!(
            "transition log-odds identity needs K = 2, got K = {}",
            beta.num_states
        )));
    }
    Ok(beta
        .unnormalized(target, prev_states)?
        .into_iter()
        .map(|u| 2.0 * u)
        .collect())
}

/// Every chain's transition matrix for every joint previous state,
/// precomputed so the sampler and simulator can look them up by code.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    num_states: usize,
    num_joint: usize,
    // [chain][joint code] -> K*K probabilities
    probs: Vec<f64>,
}

/// Joint sizes above this are not tabulated.
pub const MAX_TABULATED_JOINT: u128 = 1 << 16;

impl TransitionTable {
    pub fn new(space: &StateSpace, beta: &BetaParams) -> Result<Self> {
        let num_joint = space
            .joint_size()
            .filter(|&n| n <= MAX_TABULATED_JOINT)
            .ok_or(ChmmError::SizeLimit {
                what: "K^C for the transition table",
                size: space.joint_size().unwrap_or(u128::MAX),
                limit: MAX_TABULATED_JOINT,
            })? as usize;
        let k = space.num_states();
        let c = space.num_chains();
        let mut probs = Vec::with_capacity(c * num_joint * k * k);
        for chain in 0..c {
            for code in 0..num_joint {
                let prev = space.decode(code);
                let t = build_transition(beta, chain, &prev)?;
                probs.extend_from_slice(t.as_slice());
            }
        }
        Ok(Self {
            num_states: k,
            num_joint,
            probs,
        })
    }

    /// Row `from` of chain `chain`'s matrix when the joint previous state
    /// has code `prev_code`.
    #[inline]
    pub fn row(&self, chain: usize, prev_code: usize, from: usize) -> &[f64] {
        let k = self.num_states;
        let start = ((chain * self.num_joint + prev_code) * k + from) * k;
        &self.probs[start..start + k]
    }

    #[inline]
    pub fn prob(&self, chain: usize, prev_code: usize, from: usize, to: usize) -> f64 {
        self.row(chain, prev_code, from)[to]
    }
}

/// Confusion matrix: row = true state, column = observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionMatrix {
    num_states: usize,
    probs: Vec<f64>,
}

impl EmissionMatrix {
    pub fn new(num_states: usize, probs: Vec<f64>) -> Result<Self> {
        check_stochastic(num_states, &probs, "emission")?;
        Ok(Self { num_states, probs })
    }

    pub fn identity(num_states: usize) -> Self {
        let mut probs = vec![0.0; num_states * num_states];
        for i in 0..num_states {
            probs[i * num_states + i] = 1.0;
        }
        Self { num_states, probs }
    }

    /// `K = 2` emission with the given swab sensitivity and specificity.
    pub fn from_accuracy(baseline: usize, sensitivity: f64, specificity: f64) -> Result<Self> {
        let mut probs = vec![0.0; 4];
        let col = 1 - baseline;
        probs[baseline * 2 + baseline] = specificity;
        probs[baseline * 2 + col] = 1.0 - specificity;
        probs[col * 2 + col] = sensitivity;
        probs[col * 2 + baseline] = 1.0 - sensitivity;
        Self::new(2, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn get(&self, truth: usize, observed: usize) -> f64 {
        self.probs[truth * self.num_states + observed]
    }

    pub fn row(&self, truth: usize) -> &[f64] {
        &self.probs[truth * self.num_states..(truth + 1) * self.num_states]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// `E[colonized][positive]` for `K = 2`.
    pub fn sensitivity(&self, baseline: usize) -> f64 {
        let col = 1 - baseline;
        self.get(col, col)
    }

    /// `E[clear][negative]` for `K = 2`.
    pub fn specificity(&self, baseline: usize) -> f64 {
        self.get(baseline, baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDistribution(Vec<f64>);

impl InitialDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_stochastic(probs.len(), &probs, "initial distribution")?;
        Ok(Self(probs))
    }

    pub fn uniform(num_states: usize) -> Self {
        Self(vec![1.0 / num_states as f64; num_states])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

fn check_stochastic(k: usize, probs: &[f64], what: &str) -> Result<()> {
    if k == 0 || probs.len() % k != 0 || probs.is_empty() {
        return Err(ChmmError::InvalidParameter(format!(
            "{what} has {} entries, not a multiple of {k}",
            probs.len()
        )));
    }
    for row in probs.chunks(k) {
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ChmmError::InvalidParameter(format!(
                "{what} has entries outside [0, 1]"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ChmmError::InvalidParameter(format!(
                "{what} row sums to {sum}"
            )));
        }
    }
    Ok(())
}

/// One complete parameter set: β plus per-chain emissions and initial
/// distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChmmParams {
    pub beta: BetaParams,
    pub emissions: Vec<EmissionMatrix>,
    pub initials: Vec<InitialDistribution>,
}

impl ChmmParams {
    /// β = 0, identity emissions, uniform initial distributions.
    pub fn neutral(space: &StateSpace) -> Self {
        let k = space.num_states();
        Self {
            beta: BetaParams::zeros(space),
            emissions: vec![EmissionMatrix::identity(k); space.num_chains()],
            initials: vec![InitialDistribution::uniform(k); space.num_chains()],
        }
    }

    pub fn validate(&self, space: &StateSpace) -> Result<()> {
        let c = space.num_chains();
        let k = space.num_states();
        if self.beta.num_chains != c
            || self.beta.num_states != k
            || self.beta.baseline != space.baseline()
            || self.beta.blocks.len() != c
            || self
                .beta
                .blocks
                .iter()
                .any(|b| b.len() != BetaParams::block_len(c, k) || b.iter().any(|v| !v.is_finite()))
        {
            return Err(ChmmError::InvalidParameter(
                "β does not match the state space".into(),
            ));
        }
        if self.emissions.len() != c || self.initials.len() != c {
            return Err(ChmmError::InvalidParameter(format!(
                "expected {c} emission matrices and initial distributions"
            )));
        }
        for e in &self.emissions {
            if e.num_states != k {
                return Err(ChmmError::InvalidParameter(
                    "emission matrix has the wrong number of states".into(),
                ));
            }
            check_stochastic(k, &e.probs, "emission")?;
        }
        for init in &self.initials {
            if init.0.len() != k {
                return Err(ChmmError::InvalidParameter(
                    "initial distribution has the wrong number of states".into(),
                ));
            }
            check_stochastic(k, &init.0, "initial distribution")?;
        }
        Ok(())
    }
}
