//! Two-state explicit-duration hidden semi-Markov model over binned local
//! classifier scores.
//!
//! The hidden process is a chain over `(state, elapsed)` pairs with `elapsed`
//! capped at `D`. From `(j, d)` the chain either continues in `j` with
//! elapsed `min(d + 1, D)` or switches to the other state with elapsed 1.
//! The switch hazard at `d < D` is `p_j(d) / P(duration >= d)`, so a run
//! that exits lasts `d` steps with probability `p_j(d)`; at the cap the
//! hazard is `tail_j`, giving durations of `D` or more a geometric tail.
//! With `D = 1` this is exactly a two-state HMM whose self-transition
//! probability is `1 - tail_j`.
//!
//! Every recursion runs in log space and costs `O(|Q|·D·T)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Label;

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_MAX_DURATION: usize = 20;

/// Hidden states. Index 0 is occupied, 1 is vacant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum State {
    O,
    N,
}

impl State {
    pub const ALL: [State; 2] = [State::O, State::N];

    pub fn index(self) -> usize {
        match self {
            State::O => 0,
            State::N => 1,
        }
    }

    pub fn from_index(i: usize) -> State {
        if i == 0 {
            State::O
        } else {
            State::N
        }
    }

    pub fn label(self) -> Label {
        match self {
            State::O => Label::O,
            State::N => Label::N,
        }
    }

    pub fn from_label(l: Label) -> Option<State> {
        match l {
            Label::O => Some(State::O),
            Label::N => Some(State::N),
            Label::P => None,
        }
    }
}

/// Maps a probability to a 1-based bin of `bins` equal-width bins.
pub fn discretize(p: f64, bins: usize) -> usize {
    let b = (p.clamp(0.0, 1.0) * bins as f64).floor() as usize + 1;
    b.min(bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsmmModel {
    pub bins: usize,
    pub max_duration: usize,
    /// Initial state distribution, indexed by [`State::index`].
    pub pi: [f64; 2],
    /// `dur[j][d - 1] = p_j(d)`; the last entry is the mass of durations >= D.
    pub dur: [Vec<f64>; 2],
    /// Switch hazard once a run has lasted D steps.
    pub tail: [f64; 2],
    /// `emit[j][v - 1] = b_j(v)`.
    pub emit: [Vec<f64>; 2],
}

#[derive(Serialize, Deserialize)]
struct PerState<T> {
    #[serde(rename = "O")]
    o: T,
    #[serde(rename = "N")]
    n: T,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(rename = "B")]
    bins: usize,
    #[serde(rename = "D")]
    max_duration: usize,
    pi: [f64; 2],
    dur: PerState<Vec<f64>>,
    emit: PerState<Vec<f64>>,
    tail: PerState<f64>,
}

impl Serialize for HsmmModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ModelFile {
            bins: self.bins,
            max_duration: self.max_duration,
            pi: self.pi,
            dur: PerState {
                o: self.dur[0].clone(),
                n: self.dur[1].clone(),
            },
            emit: PerState {
                o: self.emit[0].clone(),
                n: self.emit[1].clone(),
            },
            tail: PerState {
                o: self.tail[0],
                n: self.tail[1],
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for HsmmModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = ModelFile::deserialize(d)?;
        let m = HsmmModel {
            bins: f.bins,
            max_duration: f.max_duration,
            pi: f.pi,
            dur: [f.dur.o, f.dur.n],
            tail: [f.tail.o, f.tail.n],
            emit: [f.emit.o, f.emit.n],
        };
        m.validate().map_err(serde::de::Error::custom)?;
        Ok(m)
    }
}

fn check_distribution(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Invalid(format!("{name} has {} entries, expected {len}", v.len())));
    }
    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Invalid(format!("{name} has a non-positive entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Invalid(format!("{name} sums to {s}")));
    }
    Ok(())
}

impl HsmmModel {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.max_duration == 0 {
            return Err(Error::Invalid("B and D must be positive".into()));
        }
        check_distribution("pi", &self.pi, 2)?;
        for j in 0..2 {
            check_distribution("dur", &self.dur[j], self.max_duration)?;
            check_distribution("emit", &self.emit[j], self.bins)?;
            if !(self.tail[j] > 0.0 && self.tail[j] <= 1.0) {
                return Err(Error::Invalid(format!("tail hazard {} outside (0, 1]", self.tail[j])));
            }
        }
        Ok(())
    }

    fn check_obs(&self, obs: &[usize]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::Invalid("empty observation sequence".into()));
        }
        match obs.iter().find(|&&o| o == 0 || o > self.bins) {
            Some(&bin) => Err(Error::BinOutOfRange {
                bin,
                bins: self.bins,
            }),
            None => Ok(()),
        }
    }
}

/// Log-space transition quantities derived from a model.
struct LogParams {
    d: usize,
    log_pi: [f64; 2],
    /// `log_exit[j][d - 1]`: log hazard of switching out of (j, d).
    log_exit: [Vec<f64>; 2],
    /// `log_stay[j][d - 1]`: log probability of continuing from (j, d).
    log_stay: [Vec<f64>; 2],
    log_emit: [Vec<f64>; 2],
}

impl LogParams {
    fn new(m: &HsmmModel) -> Self {
        let d = m.max_duration;
        let mut log_exit = [vec![0.0; d], vec![0.0; d]];
        let mut log_stay = [vec![0.0; d], vec![0.0; d]];
        for j in 0..2 {
            // survival[k] = P(duration >= k + 1)
            let mut survival = vec![0.0; d + 1];
            for k in (0..d).rev() {
                survival[k] = survival[k + 1] + m.dur[j][k];
            }
            for k in 0..d - 1 {
                log_exit[j][k] = m.dur[j][k].ln() - survival[k].ln();
                log_stay[j][k] = survival[k + 1].ln() - survival[k].ln();
            }
            log_exit[j][d - 1] = m.tail[j].ln();
            log_stay[j][d - 1] = (-m.tail[j]).ln_1p();
        }
        LogParams {
            d,
            log_pi: [m.pi[0].ln(), m.pi[1].ln()],
            log_exit,
            log_stay,
            log_emit: [
                m.emit[0].iter().map(|p| p.ln()).collect(),
                m.emit[1].iter().map(|p| p.ln()).collect(),
            ],
        }
    }
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log forward variables for one time step: `[j * D + (d - 1)]`.
type Slice = Vec<f64>;

fn forward_init(lp: &LogParams, o: usize, out: &mut Slice) {
    out.fill(f64::NEG_INFINITY);
    for j in 0..2 {
        out[j * lp.d] = lp.log_pi[j] + lp.log_emit[j][o - 1];
    }
}

fn forward_step(lp: &LogParams, prev: &Slice, o: usize, out: &mut Slice) {
    let d = lp.d;
    for j in 0..2 {
        let i = 1 - j;
        let e = lp.log_emit[j][o - 1];
        let prev_i = &prev[i * d..(i + 1) * d];
        let switch_in = log_sum(prev_i.iter().zip(&lp.log_exit[i]).map(|(a, h)| a + h));
        let prev_j = &prev[j * d..(j + 1) * d];
        let cur = &mut out[j * d..(j + 1) * d];
        if d == 1 {
            cur[0] = log_add(switch_in, prev_j[0] + lp.log_stay[j][0]) + e;
            continue;
        }
        cur[0] = switch_in + e;
        for k in 1..d - 1 {
            cur[k] = prev_j[k - 1] + lp.log_stay[j][k - 1] + e;
        }
        cur[d - 1] = log_add(
            prev_j[d - 2] + lp.log_stay[j][d - 2],
            prev_j[d - 1] + lp.log_stay[j][d - 1],
        ) + e;
    }
}

fn backward_step(lp: &LogParams, next: &Slice, o_next: usize, out: &mut Slice) {
    let d = lp.d;
    for j in 0..2 {
        let i = 1 - j;
        let switch = lp.log_emit[i][o_next - 1] + next[i * d];
        let e_stay = lp.log_emit[j][o_next - 1];
        for k in 0..d {
            let cont = next[j * d + (k + 1).min(d - 1)];
            out[j * d + k] = log_add(
                lp.log_exit[j][k] + switch,
                lp.log_stay[j][k] + e_stay + cont,
            );
        }
    }
}

/// Full table of log forward or backward variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeTable {
    pub len: usize,
    pub max_duration: usize,
    values: Vec<f64>,
}

impl LatticeTable {
    /// Log value at 0-based time `t`, state `s`, elapsed duration `d` (1-based).
    pub fn get(&self, t: usize, s: State, d: usize) -> f64 {
        self.values[(t * 2 + s.index()) * self.max_duration + d - 1]
    }

    fn row(&self, t: usize) -> &[f64] {
        let w = 2 * self.max_duration;
        &self.values[t * w..(t + 1) * w]
    }
}

/// Log forward variables `ln α_t(j, d)` for every step.
pub fn forward(model: &HsmmModel, obs: &[usize]) -> Result<LatticeTable> {
    model.check_obs(obs)?;
    let lp = LogParams::new(model);
    let w = 2 * lp.d;
    let mut values = vec![0.0; w * obs.len()];
    let mut cur = vec![0.0; w];
    let mut next = vec![0.0; w];
    forward_init(&lp, obs[0], &mut cur);
    values[..w].copy_from_slice(&cur);
    for (t, &o) in obs.iter().enumerate().skip(1) {
        forward_step(&lp, &cur, o, &mut next);
        std::mem::swap(&mut cur, &mut next);
        values[t * w..(t + 1) * w].copy_from_slice(&cur);
    }
    Ok(LatticeTable {
        len: obs.len(),
        max_duration: lp.d,
        values,
    })
}

/// Log backward variables `ln β_t(j, d)` for every step.
pub fn backward(model: &HsmmModel, obs: &[usize]) -> Result<LatticeTable> {
    model.check_obs(obs)?;
    let lp = LogParams::new(model);
    let w = 2 * lp.d;
    let n = obs.len();
    let mut values = vec![0.0; w * n];
    let mut cur = vec![0.0; w];
    let mut prev = vec![0.0; w];
    for t in (0..n - 1).rev() {
        backward_step(&lp, &cur, obs[t + 1], &mut prev);
        std::mem::swap(&mut cur, &mut prev);
        values[t * w..(t + 1) * w].copy_from_slice(&cur);
    }
    Ok(LatticeTable {
        len: n,
        max_duration: lp.d,
        values,
    })
}

/// `ln P(o_1..o_T | λ)`.
pub fn loglik(model: &HsmmModel, obs: &[usize]) -> Result<f64> {
    model.check_obs(obs)?;
    let lp = LogParams::new(model);
    let w = 2 * lp.d;
    let mut cur = vec![0.0; w];
    let mut next = vec![0.0; w];
    forward_init(&lp, obs[0], &mut cur);
    for &o in &obs[1..] {
        forward_step(&lp, &cur, o, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(log_sum(cur.iter().copied()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoding {
    /// MAP state per step; ties go to N.
    pub states: Vec<State>,
    /// `ln γ_t(j)`, unnormalised: `ln Σ_j γ_t(j) = ln P(o)` at every t.
    pub log_gamma: Vec<[f64; 2]>,
    pub loglik: f64,
}

impl Decoding {
    /// Posterior P(s_t = O | o).
    pub fn prob_occupied(&self, t: usize) -> f64 {
        (self.log_gamma[t][0] - self.loglik).exp()
    }
}

const CHECKPOINT: usize = 1024;

/// Posterior state marginals and per-step MAP decoding.
///
/// Forward variables are kept only every `CHECKPOINT` steps and recomputed
/// block by block during the backward sweep, so memory is `O(D·T / 1024)`
/// beyond the output.
pub fn posterior_decode(model: &HsmmModel, obs: &[usize]) -> Result<Decoding> {
    model.check_obs(obs)?;
    let lp = LogParams::new(model);
    let w = 2 * lp.d;
    let n = obs.len();

    let mut checkpoints: Vec<Slice> = Vec::with_capacity(n / CHECKPOINT + 1);
    let mut cur = vec![0.0; w];
    let mut next = vec![0.0; w];
    forward_init(&lp, obs[0], &mut cur);
    for t in 0..n {
        if t > 0 {
            forward_step(&lp, &cur, obs[t], &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        if t % CHECKPOINT == 0 {
            checkpoints.push(cur.clone());
        }
    }
    let total = log_sum(cur.iter().copied());

    let mut log_gamma = vec![[0.0; 2]; n];
    let mut beta = vec![0.0; w];
    let mut beta_prev = vec![0.0; w];
    let mut block = vec![0.0; w * CHECKPOINT];
    for (b, start) in (0..n).step_by(CHECKPOINT).enumerate().rev() {
        let end = (start + CHECKPOINT).min(n);
        block[..w].copy_from_slice(&checkpoints[b]);
        for t in start + 1..end {
            let (done, rest) = block.split_at_mut((t - start) * w);
            let prev = done[(t - start - 1) * w..].to_vec();
            let mut out = rest[..w].to_vec();
            forward_step(&lp, &prev, obs[t], &mut out);
            rest[..w].copy_from_slice(&out);
        }
        for t in (start..end).rev() {
            if t + 1 < n {
                backward_step(&lp, &beta, obs[t + 1], &mut beta_prev);
                std::mem::swap(&mut beta, &mut beta_prev);
            }
            let alpha = &block[(t - start) * w..(t - start + 1) * w];
            for j in 0..2 {
                let r = j * lp.d..(j + 1) * lp.d;
                log_gamma[t][j] = log_sum(alpha[r.clone()].iter().zip(&beta[r]).map(|(a, b)| a + b));
            }
        }
    }
    let states = log_gamma
        .iter()
        .map(|g| if g[0] > g[1] { State::O } else { State::N })
        .collect();
    Ok(Decoding {
        states,
        log_gamma,
        loglik: total,
    })
}

/// Posterior marginals from full forward/backward tables (reference path for tests).
pub fn posterior_from_tables(alpha: &LatticeTable, beta: &LatticeTable) -> Vec<[f64; 2]> {
    (0..alpha.len)
        .map(|t| {
            let (a, b) = (alpha.row(t), beta.row(t));
            let d = alpha.max_duration;
            [0, 1].map(|j| log_sum((j * d..(j + 1) * d).map(|k| a[k] + b[k])))
        })
        .collect()
}

/// A labelled observation sequence used for supervised fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub obs: Vec<usize>,
    pub states: Vec<State>,
}

/// Maximal runs of equal states as (state, length).
pub fn runs(states: &[State]) -> Vec<(State, usize)> {
    let mut out: Vec<(State, usize)> = Vec::new();
    for &s in states {
        match out.last_mut() {
            Some((last, len)) if *last == s => *len += 1,
            _ => out.push((s, 1)),
        }
    }
    out
}

/// Counting estimate with add-one smoothing; runs longer than `D` land in bin `D`.
pub fn fit_supervised(seqs: &[LabeledSequence], bins: usize, max_duration: usize) -> Result<HsmmModel> {
    if bins == 0 || max_duration == 0 {
        return Err(Error::Invalid("B and D must be positive".into()));
    }
    let seqs: Vec<&LabeledSequence> = seqs.iter().filter(|s| !s.obs.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::EmptyTraining);
    }
    let mut first = [0u64; 2];
    let mut dur = [vec![0u64; max_duration], vec![0u64; max_duration]];
    let mut emit = [vec![0u64; bins], vec![0u64; bins]];
    let mut cap_steps = [0u64; 2];
    let mut cap_exits = [0u64; 2];
    for s in &seqs {
        if s.obs.len() != s.states.len() {
            return Err(Error::LengthMismatch(s.obs.len(), s.states.len()));
        }
        first[s.states[0].index()] += 1;
        for (&o, st) in s.obs.iter().zip(&s.states) {
            if o == 0 || o > bins {
                return Err(Error::BinOutOfRange { bin: o, bins });
            }
            emit[st.index()][o - 1] += 1;
        }
        for (st, len) in runs(&s.states) {
            let j = st.index();
            dur[j][len.min(max_duration) - 1] += 1;
            if len >= max_duration {
                cap_steps[j] += (len - max_duration + 1) as u64;
                cap_exits[j] += 1;
            }
        }
    }
    let smooth = |counts: &[u64]| -> Vec<f64> {
        let total = counts.iter().sum::<u64>() as f64 + counts.len() as f64;
        counts.iter().map(|&c| (c as f64 + 1.0) / total).collect()
    };
    let pi = smooth(&first);
    Ok(HsmmModel {
        bins,
        max_duration,
        pi: [pi[0], pi[1]],
        dur: [smooth(&dur[0]), smooth(&dur[1])],
        tail: [0, 1].map(|j| (cap_exits[j] as f64 + 1.0) / (cap_steps[j] as f64 + 2.0)),
        emit: [smooth(&emit[0]), smooth(&emit[1])],
    })
}

/// Hard-EM refinement: decode with the current model, refit on the decoded
/// states, repeat. Returns the refined model and the corpus log-likelihood
/// after each iteration.
pub fn viterbi_em_refine(
    model: &HsmmModel,
    corpus: &[Vec<usize>],
    iters: usize,
) -> Result<(HsmmModel, Vec<f64>)> {
    let mut cur = model.clone();
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let decoded: Vec<LabeledSequence> = corpus
            .iter()
            .filter(|o| !o.is_empty())
            .map(|o| {
                posterior_decode(&cur, o).map(|d| LabeledSequence {
                    obs: o.clone(),
                    states: d.states,
                })
            })
            .collect::<Result<_>>()?;
        cur = fit_supervised(&decoded, cur.bins, cur.max_duration)?;
        let ll: f64 = corpus
            .iter()
            .filter(|o| !o.is_empty())
            .map(|o| loglik(&cur, o))
            .sum::<Result<f64>>()?;
        trace.push(ll);
    }
    Ok((cur, trace))
}

#[cfg(test)]
pub(crate) mod testing {
    //! Random models and an exhaustive, probability-space oracle.
    use super::*;
    use rand::Rng;

    fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mut v: Vec<f64> = raw.iter().map(|x| x / s).collect();
        // push the rounding residue into the largest entry
        let resid = 1.0 - v.iter().sum::<f64>();
        let k = (0..n).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        v[k] += resid;
        v
    }

    pub fn random_model<R: Rng>(rng: &mut R, bins: usize, d: usize) -> HsmmModel {
        let pi = random_simplex(rng, 2);
        HsmmModel {
            bins,
            max_duration: d,
            pi: [pi[0], pi[1]],
            dur: [random_simplex(rng, d), random_simplex(rng, d)],
            tail: [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)],
            emit: [random_simplex(rng, bins), random_simplex(rng, bins)],
        }
    }

    /// Probability that a run in state `j` lasts exactly `len` steps and then switches.
    fn run_exit(m: &HsmmModel, j: usize, len: usize) -> f64 {
        let d = m.max_duration;
        if len < d {
            m.dur[j][len - 1]
        } else {
            m.dur[j][d - 1] * (1.0 - m.tail[j]).powi((len - d) as i32) * m.tail[j]
        }
    }

    /// Probability that a run in state `j` lasts at least `len` steps.
    fn run_survive(m: &HsmmModel, j: usize, len: usize) -> f64 {
        let d = m.max_duration;
        if len <= d {
            m.dur[j][len - 1..].iter().sum()
        } else {
            m.dur[j][d - 1] * (1.0 - m.tail[j]).powi((len - d) as i32)
        }
    }

    /// Joint probability of a full labelling and the observations.
    pub fn labelling_prob(m: &HsmmModel, states: &[State], obs: &[usize]) -> f64 {
        let rs = runs(states);
        let mut p = m.pi[states[0].index()];
        for (k, &(s, len)) in rs.iter().enumerate() {
            let j = s.index();
            p *= if k + 1 == rs.len() {
                run_survive(m, j, len)
            } else {
                run_exit(m, j, len)
            };
        }
        for (s, &o) in states.iter().zip(obs) {
            p *= m.emit[s.index()][o - 1];
        }
        p
    }

    /// (P(o), per-step P(s_t = O, o)) by enumerating all 2^T labellings.
    pub fn enumerate(m: &HsmmModel, obs: &[usize]) -> (f64, Vec<f64>) {
        let t = obs.len();
        let mut total = 0.0;
        let mut occ = vec![0.0; t];
        for mask in 0u32..(1 << t) {
            let states: Vec<State> = (0..t)
                .map(|k| if mask >> k & 1 == 1 { State::O } else { State::N })
                .collect();
            let p = labelling_prob(m, &states, obs);
            total += p;
            for k in 0..t {
                if states[k] == State::O {
                    occ[k] += p;
                }
            }
        }
        (total, occ)
    }
}
