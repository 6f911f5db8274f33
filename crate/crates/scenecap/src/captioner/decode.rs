//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use super::{CaptionModel, DecoderState};
use crate::attention::{argmax_lowest, AttentionWeights};
use crate::error::{Error, Result};
use crate::regions::RegionSet;
use crate::scene::SceneVector;
use crate::textmetrics::{BEGIN, END};

pub const DEFAULT_MAX_LEN: usize = 30;

/// A decoded sentence. `tokens` ends with `#END#` unless the length cap was hit.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// One entry per emitted token; empty without region attention.
    pub attention: Vec<AttentionWeights>,
    pub log_prob: f64,
}

impl Decoded {
    /// Tokens without the trailing `#END#`.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub decoded: Decoded,
    pub state: DecoderState,
    pub finished: bool,
}

/// Best next token; `#BEGIN#` is never emitted and ties pick the lowest id.
pub(crate) fn best_token(scores: &[f64]) -> usize {
    let mut masked = scores.to_vec();
    masked[BEGIN] = f64::NEG_INFINITY;
    argmax_lowest(&masked)
}

pub fn greedy_decode(
    model: &CaptionModel,
    regions: &RegionSet,
    scene: Option<&SceneVector>,
    max_len: usize,
) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let mut state = model.initial_state(regions, scene)?;
    let mut out = Decoded {
        tokens: Vec::new(),
        attention: Vec::new(),
        log_prob: 0.0,
    };
    while out.tokens.len() < max_len {
        let step = model.step(&state, regions, scene)?;
        let token = best_token(&step.log_probs);
        out.log_prob += step.log_probs[token];
        out.tokens.push(token);
        out.attention.extend(step.attention);
        if token == END {
            break;
        }
        state = DecoderState {
            prev_token: token,
            ..step.state
        };
    }
    Ok(out)
}

/// Beam search keeping `beam` live hypotheses per step.
///
/// Candidates are ranked by log-probability, then token id, then parent
/// rank. Hypotheses that emit `#END#` retire; any still live after
/// `max_len` tokens retire unfinished. The result is sorted best first.
pub fn beam_decode(
    model: &CaptionModel,
    regions: &RegionSet,
    scene: Option<&SceneVector>,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("beam and max_len must be positive".into()));
    }
    let mut live = vec![Hypothesis {
        decoded: Decoded {
            tokens: Vec::new(),
            attention: Vec::new(),
            log_prob: 0.0,
        },
        state: model.initial_state(regions, scene)?,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut expansions = Vec::new();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (rank, hyp) in live.iter().enumerate() {
            let step = model.step(&hyp.state, regions, scene)?;
            for (tok, &lp) in step.log_probs.iter().enumerate() {
                if tok != BEGIN {
                    candidates.push((hyp.decoded.log_prob + lp, tok, rank));
                }
            }
            expansions.push(step);
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam);
        for &(log_prob, tok, rank) in candidates.iter().take(beam) {
            let parent = &live[rank];
            let step = &expansions[rank];
            let mut decoded = parent.decoded.clone();
            decoded.tokens.push(tok);
            decoded.log_prob = log_prob;
            decoded.attention.extend(step.attention.clone());
            let hyp = Hypothesis {
                decoded,
                state: DecoderState {
                    prev_token: tok,
                    ..step.state.clone()
                },
                finished: tok == END,
            };
            if hyp.finished {
                done.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(|a, b| b.decoded.log_prob.partial_cmp(&a.decoded.log_prob).unwrap_or(Ordering::Equal));
    Ok(done)
}
