//! Linear-softmax autoregressive sequence policies.
//!
//! Every agent is a categorical model over the shared vocabulary whose logits
//! are `features(context, prefix) · W`. The feature vector is sparse and made
//! of these blocks, laid out in order:
//!
//! | block         | width  | content                                                   |
//! |---------------|--------|-----------------------------------------------------------|
//! | bias          | 1      | constant 1                                                |
//! | bag           | V      | token counts of the context divided by its length          |
//! | last          | V + 1  | one-hot of the last generated token (`V` = none yet)       |
//! | position      | 8      | bucket of the output position: 0,1,2,3,4-7,8-15,16-31,32+  |
//! | cursor token  | V + 1  | token under the read cursor (`V` = past the last item)     |
//! | cursor flag   | 2      | whether the item under the cursor is flagged NOISE         |
//! | recall        | V + 1  | token after the last later occurrence of the first context token (`V` = none) |
//!
//! The read cursor walks the fact items of the context: a slot token followed
//! by a value token, plus the record flag when one follows. Outputs are
//! fact-level: a prefix is split into items where a slot token starts a
//! two-token `(slot, value)` item and any other token is a one-token skip.
//! After `r` complete items and `o` tokens into the current one, the cursor
//! shows the slot (`o = 0`) or value (`o = 1`) of the context's `r`-th item.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::PerAgent;
use crate::env::{Token, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Builder,
    Summarizer,
    Responder,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Builder, Role::Summarizer, Role::Responder];

    /// Tree level, 1-based from the root.
    pub fn level(self) -> u8 {
        match self {
            Role::Builder => 1,
            Role::Summarizer => 2,
            Role::Responder => 3,
        }
    }

    pub fn from_level(level: u8) -> Option<Role> {
        match level {
            1 => Some(Role::Builder),
            2 => Some(Role::Summarizer),
            3 => Some(Role::Responder),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self.level() as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Builder => "builder",
            Role::Summarizer => "summarizer",
            Role::Responder => "responder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub role: Role,
    pub tokens: Vec<Token>,
}

impl Context {
    pub fn new(role: Role, tokens: Vec<Token>) -> Self {
        Self { role, tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSequence {
    pub tokens: Vec<Token>,
    pub logprobs_old: Vec<f64>,
}

impl SampledSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of tokens excluding a terminating end-of-sequence token.
    pub fn content_len(&self, vocab: &Vocab) -> usize {
        match self.tokens.last() {
            Some(&t) if t == vocab.eos() => self.tokens.len() - 1,
            _ => self.tokens.len(),
        }
    }
}

const POSITION_BUCKETS: usize = 8;

fn position_bucket(pos: usize) -> usize {
    match pos {
        0..=3 => pos,
        4..=7 => 4,
        8..=15 => 5,
        16..=31 => 6,
        _ => 7,
    }
}

/// Offsets of each feature block for a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub vocab_size: usize,
    pub bag: usize,
    pub last: usize,
    pub position: usize,
    pub cursor_token: usize,
    pub cursor_flag: usize,
    pub recall: usize,
    pub dim: usize,
}

impl FeatureLayout {
    pub fn new(vocab: &Vocab) -> Self {
        let v = vocab.size();
        let bag = 1;
        let last = bag + v;
        let position = last + v + 1;
        let cursor_token = position + POSITION_BUCKETS;
        let cursor_flag = cursor_token + v + 1;
        let recall = cursor_flag + 2;
        Self {
            vocab_size: v,
            bag,
            last,
            position,
            cursor_token,
            cursor_flag,
            recall,
            dim: recall + v + 1,
        }
    }
}

/// A `(slot, value)` pair read from a context, with its NOISE flag if one followed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    pub slot: Token,
    pub value: Token,
    pub noisy: bool,
}

/// Per-context quantities shared by every decoding step.
#[derive(Debug, Clone)]
pub struct ContextView {
    layout: FeatureLayout,
    bag: Vec<(usize, f64)>,
    items: Vec<Item>,
    recall: Option<Token>,
}

impl ContextView {
    pub fn new(vocab: &Vocab, tokens: &[Token]) -> Result<Self> {
        let layout = FeatureLayout::new(vocab);
        let v = layout.vocab_size;
        let mut counts = vec![0usize; v];
        for &t in tokens {
            if t as usize >= v {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: v,
                });
            }
            counts[t as usize] += 1;
        }
        let scale = 1.0 / tokens.len().max(1) as f64;
        let bag = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(t, &c)| (layout.bag + t, c as f64 * scale))
            .collect();

        let mut items = Vec::new();
        let mut pos = 0;
        while pos < tokens.len() {
            let pair = vocab.is_slot(tokens[pos])
                && tokens.get(pos + 1).is_some_and(|&t| vocab.is_value(t));
            if !pair {
                pos += 1;
                continue;
            }
            let flag = tokens.get(pos + 2).copied().filter(|&t| vocab.is_flag(t));
            items.push(Item {
                slot: tokens[pos],
                value: tokens[pos + 1],
                noisy: flag == Some(vocab.noise()),
            });
            pos += 2 + flag.is_some() as usize;
        }

        let recall = tokens.split_first().and_then(|(&key, rest)| {
            rest.iter()
                .rposition(|&t| t == key)
                .and_then(|i| rest.get(i + 1).copied())
        });

        Ok(Self {
            layout,
            bag,
            items,
            recall,
        })
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    /// Fact items recovered from the context by the cursor parse.
    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn recall(&self) -> Option<Token> {
        self.recall
    }

    /// Sparse feature vector for the next token given the decoder state.
    pub fn features(&self, state: &DecoderState) -> Vec<(usize, f64)> {
        let l = &self.layout;
        let v = l.vocab_size;
        let mut out = Vec::with_capacity(self.bag.len() + 6);
        out.push((0, 1.0));
        out.extend_from_slice(&self.bag);
        out.push((l.last + state.last.map_or(v, |t| t as usize), 1.0));
        out.push((l.position + position_bucket(state.position), 1.0));
        match self.items.get(state.items) {
            Some(item) => {
                let t = if state.offset == 0 {
                    item.slot
                } else {
                    item.value
                };
                out.push((l.cursor_token + t as usize, 1.0));
                out.push((l.cursor_flag + item.noisy as usize, 1.0));
            }
            None => out.push((l.cursor_token + v, 1.0)),
        }
        out.push((l.recall + self.recall.map_or(v, |t| t as usize), 1.0));
        out
    }
}

/// Prefix summary that determines the position-dependent features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecoderState {
    pub position: usize,
    pub last: Option<Token>,
    pub items: usize,
    pub offset: usize,
}

impl DecoderState {
    pub fn advance(&mut self, vocab: &Vocab, token: Token) {
        self.position += 1;
        self.last = Some(token);
        if self.offset == 0 && vocab.is_slot(token) {
            self.offset = 1;
        } else {
            self.offset = 0;
            self.items += 1;
        }
    }
}

/// Weights of one agent, a `feature_dim × vocab_size` matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub role: Role,
    pub vocab: Vocab,
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(role: Role, vocab: Vocab) -> Self {
        let layout = FeatureLayout::new(&vocab);
        Self {
            role,
            vocab,
            weights: vec![0.0; layout.dim * layout.vocab_size],
        }
    }

    /// Weights encoding a role-appropriate starting behaviour of the given
    /// strength: builders and summarizers copy the `(slot, value)` item under
    /// the cursor and stop when the items run out; responders answer with the
    /// recalled value.
    pub fn with_prior(role: Role, vocab: Vocab, strength: f64) -> Self {
        let mut params = Self::zeros(role, vocab);
        let l = params.layout();
        let v = l.vocab_size;
        match role {
            Role::Builder | Role::Summarizer => {
                for t in 0..v {
                    params.weights[(l.cursor_token + t) * v + t] += strength;
                }
                // Stopping is discouraged everywhere except past the last item.
                let eos = vocab.eos() as usize;
                params.weights[eos] -= strength;
                params.weights[(l.cursor_token + v) * v + eos] += 2.0 * strength;
            }
            Role::Responder => {
                for value in 0..vocab.n_values {
                    let t = vocab.value(value) as usize;
                    params.weights[(l.recall + t) * v + t] += strength;
                }
            }
        }
        params
    }

    /// Weights with i.i.d. normal entries, used by tests and oracles.
    pub fn random<R: Rng>(role: Role, vocab: Vocab, scale: f64, rng: &mut R) -> Self {
        let mut params = Self::zeros(role, vocab);
        for w in params.weights.iter_mut() {
            *w = scale * standard_normal(rng);
        }
        params
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(&self.vocab)
    }

    pub fn feature_dim(&self) -> usize {
        self.layout().dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn weight(&self, feature: usize, token: usize) -> f64 {
        self.weights[feature * self.vocab_size() + token]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    fn check_role(&self, ctx: &Context) -> Result<()> {
        if ctx.role != self.role {
            return Err(Error::RoleMismatch {
                expected: self.role,
                actual: ctx.role,
            });
        }
        Ok(())
    }

    /// Log-softmax of the logits for a sparse feature vector.
    fn log_probs(&self, features: &[(usize, f64)]) -> Result<Vec<f64>> {
        let v = self.vocab_size();
        let mut logits = vec![0.0; v];
        for &(f, x) in features {
            let row = &self.weights[f * v..(f + 1) * v];
            for (z, w) in logits.iter_mut().zip(row) {
                *z += x * w;
            }
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Divergence(format!(
                "{} policy produced non-finite logits",
                self.role.name()
            )));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        Ok(logits.into_iter().map(|z| z - log_norm).collect())
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; only used for test weights.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Sample,
    /// Argmax per token, lowest index on ties.
    Greedy,
}

fn decode<R: Rng>(
    params: &PolicyParams,
    ctx: &Context,
    max_len: usize,
    decoding: Decoding,
    rng: &mut R,
) -> Result<SampledSequence> {
    params.check_role(ctx)?;
    if max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let view = ContextView::new(&params.vocab, &ctx.tokens)?;
    let eos = params.vocab.eos();
    let mut state = DecoderState::default();
    let mut out = SampledSequence {
        tokens: Vec::with_capacity(max_len),
        logprobs_old: Vec::with_capacity(max_len),
    };
    while out.tokens.len() < max_len {
        let lp = params.log_probs(&view.features(&state))?;
        let token = match decoding {
            Decoding::Sample => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = lp.len() - 1;
                for (t, l) in lp.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        chosen = t;
                        break;
                    }
                }
                chosen
            }
            Decoding::Greedy => {
                let mut best = 0;
                for t in 1..lp.len() {
                    if lp[t] > lp[best] {
                        best = t;
                    }
                }
                best
            }
        };
        out.tokens.push(token as Token);
        out.logprobs_old.push(lp[token]);
        if token as Token == eos {
            break;
        }
        state.advance(&params.vocab, token as Token);
    }
    Ok(out)
}

/// Samples a sequence autoregressively, recording per-token log-probabilities.
pub fn sample<R: Rng>(
    params: &PolicyParams,
    ctx: &Context,
    rng: &mut R,
    max_len: usize,
) -> Result<SampledSequence> {
    decode(params, ctx, max_len, Decoding::Sample, rng)
}

/// Argmax decoding. Consumes no randomness.
pub fn greedy(params: &PolicyParams, ctx: &Context, max_len: usize) -> Result<SampledSequence> {
    decode(
        params,
        ctx,
        max_len,
        Decoding::Greedy,
        &mut rand::rngs::mock::StepRng::new(0, 0),
    )
}

pub fn generate<R: Rng>(
    params: &PolicyParams,
    ctx: &Context,
    max_len: usize,
    decoding: Decoding,
    rng: &mut R,
) -> Result<SampledSequence> {
    decode(params, ctx, max_len, decoding, rng)
}

/// Gradient of one token's log-probability: the outer product
/// `features ⊗ (onehot(token) − softmax)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrad {
    pub features: Vec<(usize, f64)>,
    pub residual: Vec<f64>,
}

impl TokenGrad {
    pub fn entry(&self, feature: usize, token: usize) -> f64 {
        self.features
            .iter()
            .filter(|(f, _)| *f == feature)
            .map(|(_, x)| x * self.residual[token])
            .sum()
    }

    /// `dense += scale * self`, for a row-major `feature_dim × vocab` buffer.
    pub fn add_scaled_to(&self, dense: &mut [f64], scale: f64) {
        let v = self.residual.len();
        for &(f, x) in &self.features {
            let row = &mut dense[f * v..(f + 1) * v];
            let coef = scale * x;
            for (d, r) in row.iter_mut().zip(&self.residual) {
                *d += coef * r;
            }
        }
    }

    pub fn to_dense(&self, feature_dim: usize) -> Vec<f64> {
        let mut dense = vec![0.0; feature_dim * self.residual.len()];
        self.add_scaled_to(&mut dense, 1.0);
        dense
    }
}

/// Log-probabilities of `tokens` and, optionally, their gradients, in one pass.
pub fn score(
    params: &PolicyParams,
    ctx: &Context,
    tokens: &[Token],
    with_grad: bool,
) -> Result<(Vec<f64>, Vec<TokenGrad>)> {
    params.check_role(ctx)?;
    let view = ContextView::new(&params.vocab, &ctx.tokens)?;
    let v = params.vocab_size();
    let mut state = DecoderState::default();
    let mut logprobs = Vec::with_capacity(tokens.len());
    let mut grads = Vec::with_capacity(if with_grad { tokens.len() } else { 0 });
    for &token in tokens {
        if token as usize >= v {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: v,
            });
        }
        let features = view.features(&state);
        let lp = params.log_probs(&features)?;
        logprobs.push(lp[token as usize]);
        if with_grad {
            let mut residual: Vec<f64> = lp.iter().map(|l| -l.exp()).collect();
            residual[token as usize] += 1.0;
            grads.push(TokenGrad { features, residual });
        }
        state.advance(&params.vocab, token);
    }
    Ok((logprobs, grads))
}

/// Per-token log-probabilities under `params`; equals what [`sample`] records.
pub fn logprob(params: &PolicyParams, ctx: &Context, tokens: &[Token]) -> Result<Vec<f64>> {
    score(params, ctx, tokens, false).map(|(lp, _)| lp)
}

/// Per-token gradients of the log-probability with respect to the weights.
pub fn grad_logprob(
    params: &PolicyParams,
    ctx: &Context,
    tokens: &[Token],
) -> Result<Vec<TokenGrad>> {
    score(params, ctx, tokens, true).map(|(_, g)| g)
}

/// The three agents' parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policies {
    pub builder: PolicyParams,
    pub summarizer: PolicyParams,
    pub responder: PolicyParams,
}

impl Policies {
    pub fn new(builder: PolicyParams, summarizer: PolicyParams, responder: PolicyParams) -> Self {
        debug_assert_eq!(builder.role, Role::Builder);
        debug_assert_eq!(summarizer.role, Role::Summarizer);
        debug_assert_eq!(responder.role, Role::Responder);
        Self {
            builder,
            summarizer,
            responder,
        }
    }

    pub fn zeros(vocab: Vocab) -> Self {
        Self::new(
            PolicyParams::zeros(Role::Builder, vocab),
            PolicyParams::zeros(Role::Summarizer, vocab),
            PolicyParams::zeros(Role::Responder, vocab),
        )
    }

    /// Role-specific priors of per-role strength; with `tied` every agent
    /// starts from the sum of the three.
    pub fn with_prior(vocab: Vocab, strength: &PerAgent<f64>, tied: bool) -> Self {
        let mut p = Self::new(
            PolicyParams::with_prior(Role::Builder, vocab, strength.builder),
            PolicyParams::with_prior(Role::Summarizer, vocab, strength.summarizer),
            PolicyParams::with_prior(Role::Responder, vocab, strength.responder),
        );
        if tied {
            let shared: Vec<f64> = (0..p.builder.weights.len())
                .map(|i| Role::ALL.iter().map(|&r| p.get(r).weights[i]).sum())
                .collect();
            for role in Role::ALL {
                p.get_mut(role).weights = shared.clone();
            }
        }
        p
    }

    pub fn get(&self, role: Role) -> &PolicyParams {
        match role {
            Role::Builder => &self.builder,
            Role::Summarizer => &self.summarizer,
            Role::Responder => &self.responder,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut PolicyParams {
        match role {
            Role::Builder => &mut self.builder,
            Role::Summarizer => &mut self.summarizer,
            Role::Responder => &mut self.responder,
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.builder.vocab
    }

    pub fn is_finite_all(&self) -> bool {
        Role::ALL.iter().all(|&r| self.get(r).is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::new(3, 3)
    }

    fn ctx(role: Role, tokens: &[Token]) -> Context {
        Context::new(role, tokens.to_vec())
    }

    fn history() -> Vec<Token> {
        let v = vocab();
        vec![
            v.slot(0),
            v.value(1),
            v.fact(),
            v.slot(2),
            v.value(0),
            v.noise(),
            v.slot(1),
            v.value(2),
            v.fact(),
        ]
    }

    #[test]
    fn zero_weights_give_uniform_logprobs() {
        // Vocab::new(1, 0) is not a task vocabulary, but a 4-token one is handy here.
        let v4 = Vocab {
            n_slots: 1,
            n_values: 0,
        };
        assert_eq!(v4.size(), 4);
        let p = PolicyParams::zeros(Role::Builder, v4);
        let c = ctx(Role::Builder, &[0, 1]);
        let lp = logprob(&p, &c, &[0, 1, 2]).unwrap();
        for l in lp {
            assert!((l + 4f64.ln()).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample(&p, &c, &mut rng, 5).unwrap();
        assert!(s.logprobs_old.iter().all(|l| (l + 4f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn saturated_column_samples_one_token() {
        let v = vocab();
        let mut p = PolicyParams::zeros(Role::Summarizer, v);
        let target = v.value(2) as usize;
        let vs = p.vocab_size();
        p.weights[target] = 1000.0; // bias row
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample(&p, &ctx(Role::Summarizer, &history()), &mut rng, 6).unwrap();
        assert_eq!(s.tokens, vec![target as Token; 6]);
        assert!(s.logprobs_old.iter().all(|l| l.abs() < 1e-12));
        assert_eq!(vs, v.size());
    }

    #[test]
    fn role_mismatch_is_rejected() {
        let p = PolicyParams::zeros(Role::Builder, vocab());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample(&p, &ctx(Role::Responder, &[0]), &mut rng, 1),
            Err(Error::RoleMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_logits_abort() {
        let mut p = PolicyParams::zeros(Role::Builder, vocab());
        p.weights[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample(&p, &ctx(Role::Builder, &history()), &mut rng, 3),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn first_token_frequencies_match_softmax() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::random(Role::Builder, v, 0.7, &mut rng);
        let c = ctx(Role::Builder, &history());
        let probs: Vec<f64> = (0..v.size() as Token)
            .map(|t| logprob(&p, &c, &[t]).unwrap()[0].exp())
            .collect();
        let n = 100_000;
        let mut counts = vec![0usize; v.size()];
        for _ in 0..n {
            counts[sample(&p, &c, &mut rng, 1).unwrap().tokens[0] as usize] += 1;
        }
        for (t, &c) in counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            let se = (probs[t] * (1.0 - probs[t]) / n as f64).sqrt();
            assert!(
                (f - probs[t]).abs() <= 3.0 * se + 1e-12,
                "token {t}: {f} vs {}",
                probs[t]
            );
        }
    }

    #[test]
    fn uniform_gradient_closed_form() {
        let v4 = Vocab {
            n_slots: 1,
            n_values: 0,
        };
        let p = PolicyParams::zeros(Role::Builder, v4);
        let g = &grad_logprob(&p, &ctx(Role::Builder, &[0]), &[2]).unwrap()[0];
        for &(f, x) in &g.features {
            for t in 0..4 {
                let expected = if t == 2 { x * 0.75 } else { -x * 0.25 };
                assert!((g.entry(f, t) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = PolicyParams::random(Role::Builder, v, 0.5, &mut rng);
        let c = ctx(Role::Builder, &history());
        let tokens = sample(&p, &c, &mut rng, 5).unwrap().tokens;
        let dim = p.feature_dim();
        let grads = grad_logprob(&p, &c, &tokens).unwrap();
        let h = 1e-5;
        for (pos, g) in grads.iter().enumerate() {
            let dense = g.to_dense(dim);
            for idx in 0..p.weights.len() {
                let mut plus = p.clone();
                plus.weights[idx] += h;
                let mut minus = p.clone();
                minus.weights[idx] -= h;
                let fd = (logprob(&plus, &c, &tokens).unwrap()[pos]
                    - logprob(&minus, &c, &tokens).unwrap()[pos])
                    / (2.0 * h);
                let a = dense[idx];
                let scale = a.abs().max(fd.abs());
                if scale > 1e-7 {
                    assert!(
                        (a - fd).abs() / scale <= 1e-6,
                        "pos {pos} idx {idx}: {a} vs {fd}"
                    );
                } else {
                    assert!((a - fd).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn cursor_walks_items_and_skips() {
        let v = vocab();
        let view = ContextView::new(&v, &history()).unwrap();
        assert_eq!(view.items().len(), 3);
        assert!(view.items()[1].noisy && !view.items()[0].noisy);
        let l = *view.layout();
        let mut state = DecoderState::default();
        let cursor = |s: &DecoderState| {
            let f = view.features(s);
            let tok = f
                .iter()
                .find(|(f, _)| (l.cursor_token..l.cursor_flag).contains(f))
                .map(|(f, _)| f - l.cursor_token)
                .unwrap();
            let noisy = f.iter().any(|&(f, _)| f == l.cursor_flag + 1);
            (tok, noisy)
        };
        assert_eq!(cursor(&state), (v.slot(0) as usize, false));
        // copy item 0
        state.advance(&v, v.slot(0));
        assert_eq!(cursor(&state), (v.value(1) as usize, false));
        state.advance(&v, v.value(1));
        assert_eq!(cursor(&state), (v.slot(2) as usize, true));
        // skip item 1 with a one-token item
        state.advance(&v, v.noise());
        assert_eq!(cursor(&state), (v.slot(1) as usize, false));
        // a slot followed by anything closes the item
        state.advance(&v, v.slot(1));
        state.advance(&v, v.fact());
        assert_eq!(cursor(&state).0, v.size());
    }

    #[test]
    fn memory_items_parse_without_flags() {
        let v = vocab();
        let m = [
            v.slot(0),
            v.value(1),
            v.noise(),
            v.slot(2),
            v.value(0),
            v.value(1),
            v.slot(1),
        ];
        let view = ContextView::new(&v, &m).unwrap();
        let pairs: Vec<_> = view
            .items()
            .iter()
            .map(|i| (i.slot, i.value, i.noisy))
            .collect();
        assert_eq!(
            pairs,
            vec![
                (v.slot(0), v.value(1), true),
                (v.slot(2), v.value(0), false)
            ]
        );
    }

    #[test]
    fn recall_finds_last_value_after_query() {
        let v = vocab();
        let tokens = [
            v.slot(1),
            v.slot(1),
            v.value(0),
            v.fact(),
            v.slot(1),
            v.value(2),
            v.fact(),
            v.slot(0),
            v.value(1),
            v.fact(),
        ];
        let view = ContextView::new(&v, &tokens).unwrap();
        assert_eq!(view.recall(), Some(v.value(2)));
        assert_eq!(
            ContextView::new(&v, &[v.slot(2), v.slot(0)])
                .unwrap()
                .recall(),
            None
        );
    }

    #[test]
    fn prior_policies_copy_and_recall() {
        let v = vocab();
        let h = history();
        let pairs = vec![
            v.slot(0),
            v.value(1),
            v.slot(2),
            v.value(0),
            v.slot(1),
            v.value(2),
        ];
        let b = PolicyParams::with_prior(Role::Builder, v, 30.0);
        let out = greedy(&b, &ctx(Role::Builder, &h), h.len()).unwrap();
        assert_eq!(out.tokens[..pairs.len()], pairs[..]);
        assert_eq!(out.tokens[pairs.len()], v.eos());

        let s = PolicyParams::with_prior(Role::Summarizer, v, 30.0);
        let out = greedy(&s, &ctx(Role::Summarizer, &pairs), pairs.len()).unwrap();
        assert_eq!(out.tokens, pairs);

        let r = PolicyParams::with_prior(Role::Responder, v, 30.0);
        let mut c3 = vec![v.slot(2)];
        c3.extend(&h);
        let out = greedy(&r, &ctx(Role::Responder, &c3), 1).unwrap();
        assert_eq!(out.tokens, vec![v.value(0)]);
    }

    #[test]
    fn generation_stops_at_eos() {
        let v = vocab();
        let mut p = PolicyParams::zeros(Role::Builder, v);
        p.weights[v.eos() as usize] = 1000.0;
        let out = greedy(&p, &ctx(Role::Builder, &history()), 9).unwrap();
        assert_eq!(out.tokens, vec![v.eos()]);
        assert_eq!(out.content_len(&v), 0);
    }

    proptest! {
        #[test]
        fn normalization_and_zero_expected_score(seed in any::<u64>(), ctx_len in 1usize..12, prefix_len in 0usize..6) {
            let v = vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PolicyParams::random(Role::Summarizer, v, 1.0, &mut rng);
            let c: Vec<Token> = (0..ctx_len).map(|_| rng.gen_range(0..v.size() as Token)).collect();
            let c = ctx(Role::Summarizer, &c);
            let prefix: Vec<Token> = (0..prefix_len).map(|_| rng.gen_range(0..v.size() as Token)).collect();
            let dim = p.feature_dim();

            let mut total = 0.0;
            let mut expected_score = vec![0.0; p.weights.len()];
            for t in 0..v.size() as Token {
                let mut seq = prefix.clone();
                seq.push(t);
                let (lp, g) = score(&p, &c, &seq, true).unwrap();
                let prob = lp[prefix_len].exp();
                total += prob;
                g[prefix_len].add_scaled_to(&mut expected_score, prob);
            }
            prop_assert!((total - 1.0).abs() < 1e-10);
            prop_assert!(expected_score.iter().all(|x| x.abs() < 1e-10));
            prop_assert_eq!(expected_score.len(), dim * v.size());
        }

        #[test]
        fn logprob_reproduces_sampled_logprobs(seed in any::<u64>(), max_len in 1usize..10) {
            let v = vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PolicyParams::random(Role::Builder, v, 1.0, &mut rng);
            let c = ctx(Role::Builder, &history());
            let s = sample(&p, &c, &mut rng, max_len).unwrap();
            prop_assert_eq!(s.tokens.len(), s.logprobs_old.len());
            prop_assert!(s.logprobs_old.iter().all(|&l| l <= 0.0));
            prop_assert!(s.tokens.len() == max_len || *s.tokens.last().unwrap() == v.eos());
            prop_assert_eq!(logprob(&p, &c, &s.tokens).unwrap(), s.logprobs_old);
        }
    }
}
