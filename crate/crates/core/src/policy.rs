//! Small autoregressive softmax policies.
//!
//! Two parameterisations share one interface:
//!
//! * `TabularBigram`: one logit row per context, where the context of the next
//!   token is the previous token (the last prompt token for the first
//!   completion step). Rows are indexed by token id; row `|V|` is the empty
//!   context used when there is no previous token at all, so theta has shape
//!   `(|V| + 1) x |V|`.
//! * `TinyMlp`: one tanh hidden layer over `[mean one-hot of the prompt,
//!   one-hot of the previous completion token]`, where the second block has
//!   an extra START slot for the first completion step.
//!
//! All arithmetic is `f64`; log-probabilities use max-subtracted log-softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Domain, Stream};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    bos: Token,
    eos: Token,
}

impl Vocab {
    pub const MAX_SIZE: usize = 64;

    pub fn new(size: usize, bos: Token, eos: Token) -> Result<Self> {
        if !(2..=Self::MAX_SIZE).contains(&size) {
            return Err(Error::Input(format!(
                "vocab size {size} outside [2, {}]",
                Self::MAX_SIZE
            )));
        }
        if bos == eos {
            return Err(Error::Input("BOS and EOS must differ".into()));
        }
        if bos as usize >= size || eos as usize >= size {
            return Err(Error::Input("reserved ids must lie inside the vocab".into()));
        }
        Ok(Vocab { size, bos, eos })
    }

    /// Vocab with BOS = 0 and EOS = 1, the layout every built-in task uses.
    pub fn standard(size: usize) -> Result<Self> {
        Self::new(size, 0, 1)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos(&self) -> Token {
        self.bos
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.size) {
            Some(t) => Err(Error::Input(format!("token {t} out of vocab of size {}", self.size))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    TabularBigram,
    TinyMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Tabular { contexts: usize, vocab: usize },
    Mlp { input: usize, hidden: usize, vocab: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Tabular { contexts, vocab } => contexts * vocab,
            Shape::Mlp { input, hidden, vocab } => hidden * input + hidden + vocab * hidden + vocab,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An immutable, versioned parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocab,
    shape: Shape,
    theta: Vec<f64>,
    version: u64,
}

/// Per-token log-probabilities of a completion and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProb {
    pub per_token: Vec<f64>,
    pub total: f64,
}

/// One sampled completion together with everything the learner needs to
/// importance-weight it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub completion: Vec<Token>,
    pub reward: f64,
    /// Filled by the learner right before an update.
    pub learner_logprobs: Vec<f64>,
    /// Recorded at generation time, one per completion token.
    pub sampler_logprobs: Vec<f64>,
    pub sampler_versions: Vec<u64>,
    pub group_id: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completion.is_empty()
    }

    pub fn oldest_version(&self) -> u64 {
        self.sampler_versions.iter().copied().min().unwrap_or(0)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.completion.len();
        if self.sampler_logprobs.len() != n
            || self.sampler_versions.len() != n
            || (!self.learner_logprobs.is_empty() && self.learner_logprobs.len() != n)
        {
            return Err(Error::Data("trajectory field lengths differ".into()));
        }
        if self
            .sampler_logprobs
            .iter()
            .chain(&self.learner_logprobs)
            .any(|lp| !lp.is_finite() || *lp > 0.0)
        {
            return Err(Error::Data("logprobs must be finite and <= 0".into()));
        }
        if self.sampler_versions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data("sampler versions must be non-decreasing".into()));
        }
        Ok(())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Token whose embedding conditions the next step: last completion token,
/// else last prompt token, else none.
fn context_token(prompt: &[Token], prefix: &[Token]) -> Option<Token> {
    prefix.last().or_else(|| prompt.last()).copied()
}

struct MlpLayout {
    input: usize,
    hidden: usize,
    vocab: usize,
}

impl MlpLayout {
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.hidden * self.input
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.vocab * self.hidden
    }
}

/// Sparse input of the MLP: (column, value) pairs.
fn mlp_input(vocab: usize, prompt: &[Token], prefix: &[Token]) -> Vec<(usize, f64)> {
    let mut x: Vec<(usize, f64)> = Vec::with_capacity(prompt.len() + 1);
    if !prompt.is_empty() {
        let inv = 1.0 / prompt.len() as f64;
        for &t in prompt {
            match x.iter_mut().find(|(c, _)| *c == t as usize) {
                Some(slot) => slot.1 += inv,
                None => x.push((t as usize, inv)),
            }
        }
    }
    let slot = prefix.last().map_or(vocab, |&t| t as usize);
    x.push((vocab + slot, 1.0));
    x
}

impl PolicyParams {
    /// All-zero parameters (uniform policy for the tabular kind).
    pub fn zeros(kind: PolicyKind, vocab: Vocab, hidden: usize) -> Result<Self> {
        let shape = Self::shape_for(kind, vocab, hidden)?;
        Ok(PolicyParams {
            vocab,
            shape,
            theta: vec![0.0; shape.len()],
            version: 0,
        })
    }

    /// Gaussian initialisation with standard deviation `scale`. For the MLP
    /// the output layer is scaled down by a further factor of ten so the
    /// initial policy is close to uniform.
    pub fn random(kind: PolicyKind, vocab: Vocab, hidden: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(kind, vocab, hidden)?;
        let mut rng = Stream::new(seed, Domain::Init, 0);
        let out_start = match p.shape {
            Shape::Mlp { .. } => p.mlp_layout().w2(),
            Shape::Tabular { .. } => usize::MAX,
        };
        for (i, th) in p.theta.iter_mut().enumerate() {
            let s = if i >= out_start { scale * 0.1 } else { scale };
            *th = s * rng.normal();
        }
        Ok(p)
    }

    pub fn from_theta(kind: PolicyKind, vocab: Vocab, hidden: usize, theta: Vec<f64>, version: u64) -> Result<Self> {
        let shape = Self::shape_for(kind, vocab, hidden)?;
        if theta.len() != shape.len() {
            return Err(Error::Input(format!(
                "theta length {} does not match shape length {}",
                theta.len(),
                shape.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("theta must be finite".into()));
        }
        Ok(PolicyParams {
            vocab,
            shape,
            theta,
            version,
        })
    }

    fn shape_for(kind: PolicyKind, vocab: Vocab, hidden: usize) -> Result<Shape> {
        let v = vocab.size();
        Ok(match kind {
            PolicyKind::TabularBigram => Shape::Tabular {
                contexts: v + 1,
                vocab: v,
            },
            PolicyKind::TinyMlp => {
                if !(1..=32).contains(&hidden) {
                    return Err(Error::Input(format!("mlp hidden size {hidden} outside [1, 32]")));
                }
                Shape::Mlp {
                    input: 2 * v + 1,
                    hidden,
                    vocab: v,
                }
            }
        })
    }

    /// Successor snapshot with new parameters and `version + 1`.
    pub fn successor(&self, theta: Vec<f64>) -> Self {
        debug_assert_eq!(theta.len(), self.theta.len());
        PolicyParams {
            vocab: self.vocab,
            shape: self.shape,
            theta,
            version: self.version + 1,
        }
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn kind(&self) -> PolicyKind {
        match self.shape {
            Shape::Tabular { .. } => PolicyKind::TabularBigram,
            Shape::Mlp { .. } => PolicyKind::TinyMlp,
        }
    }

    pub fn hidden(&self) -> usize {
        match self.shape {
            Shape::Mlp { hidden, .. } => hidden,
            Shape::Tabular { .. } => 0,
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    fn mlp_layout(&self) -> MlpLayout {
        match self.shape {
            Shape::Mlp { input, hidden, vocab } => MlpLayout { input, hidden, vocab },
            Shape::Tabular { .. } => unreachable!("mlp layout requested for tabular policy"),
        }
    }

    /// Tabular row index used for the next token.
    pub fn tabular_row(&self, prompt: &[Token], prefix: &[Token]) -> usize {
        context_token(prompt, prefix).map_or(self.vocab.size(), |t| t as usize)
    }

    fn mlp_hidden(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let l = self.mlp_layout();
        let mut h = self.theta[l.b1()..l.b1() + l.hidden].to_vec();
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.theta[l.w1() + j * l.input..l.w1() + (j + 1) * l.input];
            for &(c, xv) in x {
                *hj += row[c] * xv;
            }
            *hj = hj.tanh();
        }
        h
    }

    fn mlp_logits(&self, h: &[f64]) -> Vec<f64> {
        let l = self.mlp_layout();
        (0..l.vocab)
            .map(|v| {
                let row = &self.theta[l.w2() + v * l.hidden..l.w2() + (v + 1) * l.hidden];
                self.theta[l.b2() + v] + row.iter().zip(h).map(|(w, hv)| w * hv).sum::<f64>()
            })
            .collect()
    }

    pub fn next_logits(&self, prompt: &[Token], prefix: &[Token]) -> Vec<f64> {
        match self.shape {
            Shape::Tabular { vocab, .. } => {
                let r = self.tabular_row(prompt, prefix);
                self.theta[r * vocab..(r + 1) * vocab].to_vec()
            }
            Shape::Mlp { .. } => {
                let x = mlp_input(self.vocab.size(), prompt, prefix);
                let h = self.mlp_hidden(&x);
                self.mlp_logits(&h)
            }
        }
    }

    /// Log-probabilities of every next token given prompt and prefix.
    pub fn next_log_probs(&self, prompt: &[Token], prefix: &[Token]) -> Vec<f64> {
        log_softmax(&self.next_logits(prompt, prefix))
    }

    pub fn next_probs(&self, prompt: &[Token], prefix: &[Token]) -> Vec<f64> {
        self.next_log_probs(prompt, prefix).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, prompt: &[Token], completion: &[Token]) -> Result<LogProb> {
        self.vocab.check(prompt)?;
        self.vocab.check(completion)?;
        if completion.is_empty() {
            return Err(Error::Input("completion must be nonempty".into()));
        }
        let per_token: Vec<f64> = (0..completion.len())
            .map(|t| self.next_log_probs(prompt, &completion[..t])[completion[t] as usize])
            .collect();
        let total = per_token.iter().sum();
        Ok(LogProb { per_token, total })
    }

    /// Draws a full completion from one trajectory stream.
    pub fn sample(&self, prompt: &[Token], seed: u64, max_len: usize) -> Trajectory {
        let mut r = Rollout::new(prompt.to_vec(), 0, Stream::new(seed, Domain::Trajectory, 0), max_len);
        while !r.is_done() {
            r.step(self);
        }
        r.finish()
    }

    /// Greedy (argmax, lowest id on ties) decoding.
    pub fn greedy(&self, prompt: &[Token], max_len: usize) -> Vec<Token> {
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let logits = self.next_logits(prompt, &out);
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            out.push(best as Token);
            if best as Token == self.vocab.eos() {
                break;
            }
        }
        out
    }

    /// Adds `coef[t] * grad log pi(y_t | ...)` for every token into `out`.
    pub fn accumulate_token_scores(&self, prompt: &[Token], completion: &[Token], coef: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coef.len(), completion.len());
        debug_assert_eq!(out.len(), self.theta.len());
        for t in 0..completion.len() {
            if coef[t] == 0.0 {
                continue;
            }
            let y = completion[t] as usize;
            match self.shape {
                Shape::Tabular { vocab, .. } => {
                    let r = self.tabular_row(prompt, &completion[..t]);
                    let lp = log_softmax(&self.theta[r * vocab..(r + 1) * vocab]);
                    let row = &mut out[r * vocab..(r + 1) * vocab];
                    for (v, (o, l)) in row.iter_mut().zip(&lp).enumerate() {
                        let ind = if v == y { 1.0 } else { 0.0 };
                        *o += coef[t] * (ind - l.exp());
                    }
                }
                Shape::Mlp { .. } => self.mlp_backward(prompt, &completion[..t], y, coef[t], out),
            }
        }
    }

    fn mlp_backward(&self, prompt: &[Token], prefix: &[Token], y: usize, coef: f64, out: &mut [f64]) {
        let l = self.mlp_layout();
        let x = mlp_input(self.vocab.size(), prompt, prefix);
        let h = self.mlp_hidden(&x);
        let lp = log_softmax(&self.mlp_logits(&h));
        let dlogits: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(v, l)| coef * (if v == y { 1.0 } else { 0.0 } - l.exp()))
            .collect();
        let mut dh = vec![0.0; l.hidden];
        for (v, &dl) in dlogits.iter().enumerate() {
            out[l.b2() + v] += dl;
            let w_off = l.w2() + v * l.hidden;
            for j in 0..l.hidden {
                out[w_off + j] += dl * h[j];
                dh[j] += dl * self.theta[w_off + j];
            }
        }
        for j in 0..l.hidden {
            let dpre = dh[j] * (1.0 - h[j] * h[j]);
            out[l.b1() + j] += dpre;
            let row = l.w1() + j * l.input;
            for &(c, xv) in &x {
                out[row + c] += dpre * xv;
            }
        }
    }

    /// Score gradient `grad_theta log pi(completion | prompt)`.
    pub fn score_gradient(&self, prompt: &[Token], completion: &[Token]) -> Vec<f64> {
        let mut g = vec![0.0; self.theta.len()];
        self.accumulate_token_scores(prompt, completion, &vec![1.0; completion.len()], &mut g);
        g
    }
}

/// Incremental generation of one completion. The sampler may swap the
/// parameter snapshot between calls to [`Rollout::step`]; each token records
/// the version that produced it.
#[derive(Debug, Clone)]
pub struct Rollout {
    traj: Trajectory,
    stream: Stream,
    max_len: usize,
    done: bool,
}

impl Rollout {
    pub fn new(prompt: Vec<Token>, group_id: u64, stream: Stream, max_len: usize) -> Self {
        assert!(max_len >= 1, "max_len must be at least 1");
        Rollout {
            traj: Trajectory {
                prompt,
                completion: Vec::with_capacity(max_len),
                reward: 0.0,
                learner_logprobs: Vec::new(),
                sampler_logprobs: Vec::with_capacity(max_len),
                sampler_versions: Vec::with_capacity(max_len),
                group_id,
            },
            stream,
            max_len,
            done: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn len(&self) -> usize {
        self.traj.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj.completion.is_empty()
    }

    /// Generates one token under `params`.
    pub fn step(&mut self, params: &PolicyParams) {
        if self.done {
            return;
        }
        let lp = params.next_log_probs(&self.traj.prompt, &self.traj.completion);
        let u = self.stream.next_f64();
        let mut acc = 0.0;
        let mut pick = None;
        for (i, l) in lp.iter().enumerate() {
            let p = l.exp();
            if p <= 0.0 {
                continue;
            }
            acc += p;
            if u < acc {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave u above the final cumulative sum.
        let tok = pick.unwrap_or_else(|| lp.iter().rposition(|l| l.exp() > 0.0).unwrap_or(0));
        self.traj.completion.push(tok as Token);
        self.traj.sampler_logprobs.push(lp[tok]);
        self.traj.sampler_versions.push(params.version());
        if tok as Token == params.vocab().eos() || self.traj.completion.len() >= self.max_len {
            self.done = true;
        }
    }

    pub fn finish(self) -> Trajectory {
        self.traj
    }
}

/// Every completion reachable within `max_len` with its total log-probability.
pub fn enumerate_completions(
    params: &PolicyParams,
    prompt: &[Token],
    max_len: usize,
) -> Result<Vec<(Vec<Token>, f64)>> {
    const BUDGET: f64 = 1e6;
    let v = params.vocab().size();
    if (v as f64).powi(max_len as i32) > BUDGET {
        return Err(Error::Input(format!(
            "enumeration of {v}^{max_len} completions exceeds budget {BUDGET}"
        )));
    }
    let eos = params.vocab().eos();
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let next = params.next_log_probs(prompt, &prefix);
        for tok in (0..v as Token).rev() {
            let mut y = prefix.clone();
            y.push(tok);
            let total = lp + next[tok as usize];
            if tok == eos || y.len() == max_len {
                out.push((y, total));
            } else {
                stack.push((y, total));
            }
        }
    }
    Ok(out)
}

/// Exact `sum_y pi(y|x) R(x,y) grad log pi(y|x)` by full enumeration.
pub fn enumerate_exact_gradient(
    params: &PolicyParams,
    prompt: &[Token],
    reward: impl Fn(&[Token]) -> f64,
    max_len: usize,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.dim()];
    for (y, lp) in enumerate_completions(params, prompt, max_len)? {
        let coef = lp.exp() * reward(&y);
        if coef == 0.0 {
            continue;
        }
        let coefs = vec![coef; y.len()];
        params.accumulate_token_scores(prompt, &y, &coefs, &mut grad);
    }
    Ok(grad)
}
