//! Tabular softmax policies: `π_θ(a|s) = exp θ[s][a] / Σ_b exp θ[s][b]`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{GradVector, Provenance};

/// Policy logits `θ[s][a]`, stored row-major so entry `(s, a)` sits at
/// `s * |A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        let expected = n_states * n_actions;
        if logits.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: logits.len(),
            });
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::Config(format!("logit {i} is not finite")));
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    #[inline]
    pub fn index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.logits[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|x| x.is_finite())
    }

    /// `θ − step · g`.
    pub fn descend(&self, step: f64, direction: &[f64]) -> Result<Self> {
        if direction.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                actual: direction.len(),
            });
        }
        let logits = self
            .logits
            .iter()
            .zip(direction)
            .map(|(t, g)| t - step * g)
            .collect();
        Ok(Self { logits, ..*self })
    }

    /// `self − other`, entrywise.
    pub fn delta_from(&self, other: &PolicyParams) -> Vec<f64> {
        self.logits
            .iter()
            .zip(&other.logits)
            .map(|(a, b)| a - b)
            .collect()
    }

    /// FNV-1a hash of the exact bit patterns; two parameters share a
    /// fingerprint iff they are bit-identical (up to hash collisions).
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |word: u64| {
            for byte in word.to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(PRIME);
            }
        };
        feed(self.n_states as u64);
        feed(self.n_actions as u64);
        for x in &self.logits {
            feed(x.to_bits());
        }
        h
    }

    /// Writes the checkpoint text format: a `fedpg-theta <|S|> <|A|>` header
    /// followed by one logit per line in 17-significant-digit scientific
    /// notation.
    pub fn write_text(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "fedpg-theta {} {}", self.n_states, self.n_actions)?;
        for x in &self.logits {
            writeln!(out, "{}", format_real(*x))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("checkpoint text is ASCII")
    }

    /// Reads the format produced by [`PolicyParams::write_text`] from a line
    /// iterator, consuming exactly the header plus `|S|·|A|` lines.
    pub fn read_text<I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = std::io::Result<String>>,
    {
        let header = next_line(lines, "theta header")?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("fedpg-theta") {
            return Err(Error::Parse(format!(
                "expected `fedpg-theta` header, got `{header}`"
            )));
        }
        let n_states = parse_field::<usize>(fields.next(), "n_states")?;
        let n_actions = parse_field::<usize>(fields.next(), "n_actions")?;
        let mut logits = Vec::with_capacity(n_states * n_actions);
        for i in 0..n_states * n_actions {
            let line = next_line(lines, &format!("logit {i}"))?;
            logits.push(parse_field::<f64>(
                Some(line.trim()),
                &format!("logit {i}"),
            )?);
        }
        Self::from_logits(n_states, n_actions, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_text(&mut std::io::BufReader::new(file).lines())
    }
}

pub(crate) fn format_real(x: f64) -> String {
    let mut s = String::new();
    write!(s, "{x:.16e}").expect("formatting into a String cannot fail");
    s
}

fn next_line<I>(lines: &mut I, what: &str) -> Result<String>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    match lines.next() {
        Some(Ok(line)) => Ok(line),
        Some(Err(e)) => Err(Error::Parse(format!("reading {what}: {e}"))),
        None => Err(Error::Parse(format!(
            "unexpected end of input before {what}"
        ))),
    }
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T> {
    let raw = field.ok_or_else(|| Error::Parse(format!("missing {what}")))?;
    raw.parse()
        .map_err(|_| Error::Parse(format!("cannot parse {what} from `{raw}`")))
}

/// The operations the runtime needs from a policy class: the action
/// distribution, the score `∇_θ log π_θ(a|s)`, and sampling.
pub trait PolicyClass {
    fn action_distribution(&self, params: &PolicyParams, s: usize) -> Vec<f64>;

    /// Adds `scale · ∇_θ log π_θ(a|s)` into `out` (a θ-shaped buffer).
    fn accumulate_score(
        &self,
        params: &PolicyParams,
        s: usize,
        a: usize,
        scale: f64,
        out: &mut [f64],
    );

    fn sample_action<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        s: usize,
        rng: &mut R,
    ) -> usize {
        let probs = self.action_distribution(params, s);
        sample_index(&probs, rng)
    }
}

/// Tabular softmax, stabilized by subtracting the row maximum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Softmax;

impl Softmax {
    /// Writes `π_θ(·|s)` into `out`.
    pub fn distribution_into(params: &PolicyParams, s: usize, out: &mut [f64]) {
        let row = params.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
}

impl PolicyClass for Softmax {
    fn action_distribution(&self, params: &PolicyParams, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; params.n_actions()];
        Softmax::distribution_into(params, s, &mut out);
        out
    }

    fn accumulate_score(
        &self,
        params: &PolicyParams,
        s: usize,
        a: usize,
        scale: f64,
        out: &mut [f64],
    ) {
        let probs = self.action_distribution(params, s);
        let base = s * params.n_actions();
        for (b, p) in probs.iter().enumerate() {
            let indicator = if b == a { 1.0 } else { 0.0 };
            out[base + b] += scale * (indicator - p);
        }
    }
}

/// Inverse-CDF draw over the fixed index order.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    // u landed in the rounding gap above the last partial sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

pub fn action_distribution(params: &PolicyParams, s: usize) -> Vec<f64> {
    Softmax.action_distribution(params, s)
}

/// `∇_θ log π_θ(a|s)`: `1{a'=a} − π_θ(a'|s)` on row `s`, zero elsewhere.
pub fn log_policy_gradient(params: &PolicyParams, s: usize, a: usize) -> GradVector {
    let mut out = vec![0.0; params.len()];
    Softmax.accumulate_score(params, s, a, 1.0, &mut out);
    GradVector::new(out, Provenance::Exact)
}

pub fn sample_action<R: Rng + ?Sized>(params: &PolicyParams, s: usize, rng: &mut R) -> usize {
    Softmax.sample_action(params, s, rng)
}
