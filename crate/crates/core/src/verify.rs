//! Ownership verification as a one-sided binomial test on matching bits.
//!
//! Under the null hypothesis (an image that never carried the watermark)
//! each extracted bit agrees with the registered message independently
//! with probability 1/2, so the matching count `M` is `Binomial(L, 1/2)`
//! and `P(M > τ)` is the false-positive rate of the decision `M > τ`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::stage1::{extract_logits, Message, WatermarkDecoder};
use crate::world::LatentCodec;

/// Count of agreeing bit positions.
pub fn matching_bits(m: &Message, m_prime: &Message) -> Result<usize> {
    if m.len() != m_prime.len() {
        return Err(shape_err(format!("messages of {} and {} bits", m.len(), m_prime.len())));
    }
    Ok(m.bits().iter().zip(m_prime.bits()).filter(|(a, b)| a == b).count())
}

fn check_tau(l: usize, tau: usize) -> Result<()> {
    if l == 0 {
        return Err(Error::Invalid("message length must be positive".into()));
    }
    if tau > l {
        return Err(Error::Invalid(format!("threshold {tau} exceeds message length {l}")));
    }
    Ok(())
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

/// `Σ_{i=τ+1}^{L} C(L, i)·2^{−L}`, summed from the smallest term up. Terms
/// come from the ratio recurrence `C(L, i) = C(L, i+1)·(i+1)/(L−i)`,
/// carried in log space once `2^{−L}` would underflow.
pub fn fpr_sum(l: usize, tau: usize) -> Result<f64> {
    check_tau(l, tau)?;
    if tau == l {
        return Ok(0.0);
    }
    if l <= 1000 {
        let mut term = 0.5f64.powi(l as i32);
        let mut terms = Vec::with_capacity(l - tau);
        terms.push(term);
        for i in (tau + 1..l).rev() {
            term *= (i + 1) as f64 / (l - i) as f64;
            terms.push(term);
        }
        return Ok(compensated_sum(terms).min(1.0));
    }
    let mut lt = -(l as f64) * std::f64::consts::LN_2;
    let mut logs = Vec::with_capacity(l - tau);
    logs.push(lt);
    for i in (tau + 1..l).rev() {
        lt += ((i + 1) as f64 / (l - i) as f64).ln();
        logs.push(lt);
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((top.exp() * compensated_sum(logs.iter().map(|v| (v - top).exp()))).min(1.0))
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0` (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::Invalid(format!("incomplete beta continued fraction did not converge (a={a}, b={b})")))
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::Invalid(format!("incomplete beta parameters out of range (x={x}, a={a}, b={b})")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

/// The same tail as [`fpr_sum`] through `I_{1/2}(τ+1, L−τ)`.
pub fn fpr_beta(l: usize, tau: usize) -> Result<f64> {
    check_tau(l, tau)?;
    if tau == l {
        return Ok(0.0);
    }
    regularized_incomplete_beta(0.5, (tau + 1) as f64, (l - tau) as f64)
}

/// Smallest `τ` with `fpr_sum(L, τ) ≤ target`.
pub fn threshold_for_fpr(l: usize, target_fpr: f64) -> Result<usize> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::Invalid(format!("target FPR {target_fpr} must lie in (0, 1)")));
    }
    check_tau(l, 0)?;
    for tau in 0..=l {
        if fpr_sum(l, tau)? <= target_fpr {
            return Ok(tau);
        }
    }
    unreachable!("fpr_sum(L, L) is zero")
}

/// `τ × FPR` rows for each message length and target, as CSV.
pub fn threshold_table_csv(lengths: &[usize], targets: &[f64]) -> Result<String> {
    let mut out = String::from("L,target_fpr,tau,fpr_at_tau\n");
    for &l in lengths {
        for &f in targets {
            let tau = threshold_for_fpr(l, f)?;
            out.push_str(&format!("{l},{f:e},{tau},{:e}\n", fpr_sum(l, tau)?));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationPolicy {
    pub message_len: usize,
    pub target_fpr: f64,
    pub tau: usize,
    pub message: Message,
}

impl VerificationPolicy {
    pub fn new(message: Message, target_fpr: f64) -> Result<Self> {
        let l = message.len();
        Ok(Self {
            message_len: l,
            target_fpr,
            tau: threshold_for_fpr(l, target_fpr)?,
            message,
        })
    }

    /// Re-derive `τ` and check the stored fields agree.
    pub fn validate(&self) -> Result<()> {
        if self.message.len() != self.message_len {
            return Err(Error::Invalid("policy message length disagrees with its message".into()));
        }
        let tau = threshold_for_fpr(self.message_len, self.target_fpr)?;
        if tau != self.tau {
            return Err(Error::Invalid(format!(
                "policy threshold {} does not match the derived threshold {tau}",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn fpr(&self) -> f64 {
        fpr_sum(self.message_len, self.tau).expect("validated threshold")
    }

    pub fn decide(&self, extracted: &Message) -> Result<VerificationEntry> {
        let m = matching_bits(&self.message, extracted)?;
        Ok(VerificationEntry {
            matching_bits: m,
            bit_accuracy: m as f64 / self.message_len as f64,
            accepted: m > self.tau,
            extracted: extracted.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationEntry {
    pub matching_bits: usize,
    pub bit_accuracy: f64,
    pub accepted: bool,
    pub extracted: Message,
}

pub fn verify_image(
    policy: &VerificationPolicy,
    decoder: &WatermarkDecoder,
    codec: &LatentCodec,
    image: &Tensor,
) -> Result<VerificationEntry> {
    let x = image.clone().reshape(vec![1, codec.image_dim()])?;
    let logits = extract_logits(decoder, codec, &x)?;
    check_decoder(policy, &logits)?;
    policy.decide(&Message::from_logits(logits.row(0))?)
}

fn check_decoder(policy: &VerificationPolicy, logits: &Tensor) -> Result<()> {
    if logits.cols() != policy.message_len {
        return Err(shape_err(format!(
            "decoder yields {} bits, policy expects {}",
            logits.cols(),
            policy.message_len
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// Average logits over the group, then threshold at zero.
    MeanLogit,
    /// Per-bit majority of the group's hard decisions; ties go to 1.
    MajorityVote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Averaging {
    /// Consecutive images per probe group; a short final group is kept.
    pub count: usize,
    pub mode: AveragingMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedReport {
    pub averaging: Averaging,
    pub entries: Vec<VerificationEntry>,
    pub acceptance_rate: f64,
    pub mean_bit_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub policy: VerificationPolicy,
    pub fpr_at_tau: f64,
    pub entries: Vec<VerificationEntry>,
    /// Fraction of images accepted; the TPR when the batch is watermarked.
    pub acceptance_rate: f64,
    pub mean_bit_accuracy: f64,
    /// Acceptance rate on a clean control batch, when one was verified.
    pub empirical_fpr: Option<f64>,
    pub averaged: Option<AveragedReport>,
}

fn summarize(entries: &[VerificationEntry]) -> (f64, f64) {
    let n = entries.len() as f64;
    (
        entries.iter().filter(|e| e.accepted).count() as f64 / n,
        entries.iter().map(|e| e.bit_accuracy).sum::<f64>() / n,
    )
}

/// Per-image decisions for a `[n × D_img]` (or `[n, C, H, W]`) batch, with
/// optional group aggregation reported alongside.
pub fn batch_verify(
    policy: &VerificationPolicy,
    decoder: &WatermarkDecoder,
    codec: &LatentCodec,
    images: &Tensor,
    averaging: Option<Averaging>,
) -> Result<VerificationReport> {
    let logits = if images.is_empty() {
        return Err(Error::Invalid("batch_verify needs at least one image".into()));
    } else {
        let n = images.len() / codec.image_dim().max(1);
        extract_logits(decoder, codec, &images.clone().reshape(vec![n, codec.image_dim()])?)?
    };
    verify_logits(policy, &logits, averaging)
}

/// As [`batch_verify`] on already-extracted logits `[n × L]`.
pub fn verify_logits(policy: &VerificationPolicy, logits: &Tensor, averaging: Option<Averaging>) -> Result<VerificationReport> {
    policy.validate()?;
    let logits = logits.clone().as_matrix();
    if logits.rows() == 0 {
        return Err(Error::Invalid("batch_verify needs at least one image".into()));
    }
    check_decoder(policy, &logits)?;
    let entries = (0..logits.rows())
        .map(|i| policy.decide(&Message::from_logits(logits.row(i))?))
        .collect::<Result<Vec<_>>>()?;
    let (acceptance_rate, mean_bit_accuracy) = summarize(&entries);
    let averaged = match averaging {
        None => None,
        Some(a) if a.count == 0 => return Err(Error::Invalid("averaging count must be at least 1".into())),
        Some(a) => {
            let mut groups = Vec::new();
            for start in (0..logits.rows()).step_by(a.count) {
                let end = (start + a.count).min(logits.rows());
                let l = policy.message_len;
                let mut agg = vec![0.0; l];
                for i in start..end {
                    for (o, v) in agg.iter_mut().zip(logits.row(i)) {
                        *o += match a.mode {
                            AveragingMode::MeanLogit => *v,
                            AveragingMode::MajorityVote => {
                                if *v > 0.0 {
                                    1.0
                                } else {
                                    -1.0
                                }
                            }
                        };
                    }
                }
                let bits = agg
                    .iter()
                    .map(|s| match a.mode {
                        AveragingMode::MeanLogit => u8::from(*s > 0.0),
                        AveragingMode::MajorityVote => u8::from(*s >= 0.0),
                    })
                    .collect();
                groups.push(policy.decide(&Message::new(bits)?)?);
            }
            let (rate, acc) = summarize(&groups);
            Some(AveragedReport {
                averaging: a,
                entries: groups,
                acceptance_rate: rate,
                mean_bit_accuracy: acc,
            })
        }
    };
    Ok(VerificationReport {
        fpr_at_tau: policy.fpr(),
        policy: policy.clone(),
        entries,
        acceptance_rate,
        mean_bit_accuracy,
        empirical_fpr: None,
        averaged,
    })
}

impl VerificationReport {
    /// Attach the acceptance rate of a clean control batch.
    pub fn with_control(mut self, clean: &VerificationReport) -> Self {
        self.empirical_fpr = Some(clean.acceptance_rate);
        self
    }

    pub fn tpr(&self) -> f64 {
        self.acceptance_rate
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,matching_bits,bit_accuracy,accepted,extracted\n");
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                e.matching_bits, e.bit_accuracy, e.accepted, e.extracted
            ));
        }
        out
    }
}
