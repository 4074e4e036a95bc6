use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{ensure, Result};

/// Next-token distribution source for decoding.
pub trait StepScorer {
    fn eos(&self) -> TokenId;
    /// Log-probabilities over the vocabulary after each prefix (tags excluded).
    fn log_probs(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty_alpha: f64,
    pub max_output_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_penalty_alpha: 1.0,
            max_output_len: 16,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.beam_size >= 1, Config, "beam_size must be at least 1");
        ensure!(
            self.length_penalty_alpha >= 0.0 && self.length_penalty_alpha.is_finite(),
            Config,
            "length_penalty_alpha must be a finite nonnegative number"
        );
        ensure!(
            self.max_output_len >= 1,
            Config,
            "max_output_len must be at least 1"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Output tokens without the trailing EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub score: f64,
    /// False when no hypothesis emitted EOS within the length limit.
    pub finished: bool,
}

/// `log_prob / len^alpha`, where `len` counts generated tokens including EOS.
pub fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_search<S: StepScorer + ?Sized>(
    scorer: &S,
    max_output_len: usize,
    alpha: f64,
) -> Result<Decoded> {
    let eos = scorer.eos();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_output_len {
        let lp = scorer.log_probs(std::slice::from_ref(&tokens))?.remove(0);
        let t = argmax(&lp);
        log_prob += lp[t];
        if t as TokenId == eos {
            let score = length_normalized(log_prob, tokens.len() + 1, alpha);
            return Ok(Decoded {
                tokens,
                log_prob,
                score,
                finished: true,
            });
        }
        tokens.push(t as TokenId);
    }
    let score = length_normalized(log_prob, tokens.len(), alpha);
    Ok(Decoded {
        tokens,
        log_prob,
        score,
        finished: false,
    })
}

fn better(a: &Decoded, b: &Decoded) -> bool {
    (a.finished, a.score) > (b.finished, b.score)
}

/// Beam search ranked by cumulative log-probability, finished hypotheses
/// scored by [`length_normalized`]. The greedy hypothesis is always a
/// candidate, so the result never scores below greedy decoding.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let eos = scorer.eos();
    let k = cfg.beam_size;
    let alpha = cfg.length_penalty_alpha;
    let greedy = greedy_search(scorer, cfg.max_output_len, alpha)?;
    if k == 1 {
        return Ok(greedy);
    }
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Decoded> = Vec::new();
    for _ in 0..cfg.max_output_len {
        if live.is_empty() || finished.len() >= k {
            break;
        }
        let prefixes: Vec<Vec<TokenId>> = live.iter().map(|(t, _)| t.clone()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lps[0].len());
        for (h, row) in lps.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                cands.push((live[h].1 + lp, h, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (lp, h, t) in cands {
            if next.len() >= k || lp == f64::NEG_INFINITY {
                break;
            }
            let mut tokens = live[h].0.clone();
            if t as TokenId == eos {
                if finished.len() < k {
                    let score = length_normalized(lp, tokens.len() + 1, alpha);
                    finished.push(Decoded {
                        tokens,
                        log_prob: lp,
                        score,
                        finished: true,
                    });
                }
            } else {
                tokens.push(t as TokenId);
                next.push((tokens, lp));
            }
        }
        live = next;
    }
    let mut best = finished
        .into_iter()
        .fold(None::<Decoded>, |acc, d| match acc {
            Some(a) if !better(&d, &a) => Some(a),
            _ => Some(d),
        });
    if best.is_none() {
        for (tokens, lp) in live {
            let score = length_normalized(lp, tokens.len(), alpha);
            let d = Decoded {
                tokens,
                log_prob: lp,
                score,
                finished: false,
            };
            if best.as_ref().is_none_or(|b| better(&d, b)) {
                best = Some(d);
            }
        }
    }
    Ok(match best {
        Some(b) if !better(&greedy, &b) => b,
        _ => greedy,
    })
}
