//! Synthetic rule-following task.
//!
//! The system prompt carries one rule token `R_k` among filler words; the
//! user turn carries content words and, in the adversarial variant, a
//! counter-rule `R_j` (`j ≠ k`). The correct response is
//! `R_k c1 <|im_end|>`, where `c1` is the first content word of the user
//! turn. A generation adheres when its first token is `R_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::span::{detect_span, BatchBounds, Dialect, SpanBounds};
use crate::tensor::Real;
use crate::tokenizer::{ToyTokenizer, N_CONTENT, N_RULES};
use crate::train::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleTask {
    /// Filler words on each side of the rule token, `0..=max_fillers`.
    pub max_fillers: usize,
    pub min_content: usize,
    pub max_content: usize,
    /// Probability that a sample is adversarial.
    pub adversarial_rate: f64,
    pub max_seq_len: usize,
}

impl Default for RuleTask {
    fn default() -> Self {
        Self {
            max_fillers: 2,
            min_content: 3,
            max_content: 6,
            adversarial_rate: 0.5,
            max_seq_len: 256,
        }
    }
}

/// One concrete exchange.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleInstance {
    pub rule: usize,
    pub fillers_before: Vec<u32>,
    pub fillers_after: Vec<u32>,
    /// User turn, including the counter-rule token when adversarial.
    pub user: Vec<u32>,
    pub counter_rule: Option<usize>,
}

impl RuleInstance {
    pub fn prompt(&self, tok: &ToyTokenizer) -> Vec<u32> {
        let mut ids = vec![ToyTokenizer::IM_START, ToyTokenizer::SYSTEM];
        ids.extend(&self.fillers_before);
        ids.push(tok.rule(self.rule));
        ids.extend(&self.fillers_after);
        ids.extend([ToyTokenizer::IM_END, ToyTokenizer::IM_START, ToyTokenizer::USER]);
        ids.extend(&self.user);
        ids.extend([ToyTokenizer::IM_END, ToyTokenizer::IM_START, ToyTokenizer::ASSISTANT]);
        ids
    }

    pub fn target(&self, tok: &ToyTokenizer) -> Vec<u32> {
        reference_response(tok, self.rule, &self.user)
    }

    pub fn is_adversarial(&self) -> bool {
        self.counter_rule.is_some()
    }
}

/// `R_rule`, the first content word of `user`, then `<|im_end|>`.
pub fn reference_response(tok: &ToyTokenizer, rule: usize, user: &[u32]) -> Vec<u32> {
    let mut out = vec![tok.rule(rule)];
    out.extend(user.iter().copied().filter(|&id| tok.is_content(id)).take(1));
    out.push(ToyTokenizer::IM_END);
    out
}

/// A response adheres when it opens with the system rule token.
pub fn adheres(tok: &ToyTokenizer, rule: usize, response: &[u32]) -> bool {
    response.first() == Some(&tok.rule(rule))
}

impl RuleTask {
    pub fn validate(&self) -> Result<()> {
        if self.min_content < 2 || self.min_content > self.max_content {
            return Err(Error::Config("need 2 ≤ min_content ≤ max_content".into()));
        }
        if !(0.0..=1.0).contains(&self.adversarial_rate) {
            return Err(Error::Config("adversarial_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn draw(&self, tok: &ToyTokenizer, rng: &mut ChaCha8Rng, adversarial: bool, content_cap: usize) -> RuleInstance {
        let rule = rng.random_range(0..N_RULES);
        let word = |rng: &mut ChaCha8Rng| tok.content(rng.random_range(0..N_CONTENT));
        let nb = rng.random_range(0..=self.max_fillers);
        let na = rng.random_range(0..=self.max_fillers);
        let fillers_before = (0..nb).map(|_| word(rng)).collect();
        let fillers_after = (0..na).map(|_| word(rng)).collect();
        let m = rng.random_range(self.min_content..=self.max_content.min(content_cap).max(self.min_content));
        let mut user: Vec<u32> = (0..m).map(|_| word(rng)).collect();
        let counter_rule = adversarial.then(|| {
            let j = (rule + rng.random_range(1..N_RULES)) % N_RULES;
            let at = rng.random_range(0..=user.len());
            user.insert(at, tok.rule(j));
            j
        });
        RuleInstance {
            rule,
            fillers_before,
            fillers_after,
            user,
            counter_rule,
        }
    }

    /// Draws an instance whose prompt plus response fits `max_seq_len`,
    /// redrawing with a shorter user turn when it does not.
    pub fn instance(&self, tok: &ToyTokenizer, rng: &mut ChaCha8Rng, adversarial: bool) -> Result<RuleInstance> {
        let mut cap = self.max_content;
        for _ in 0..64 {
            let inst = self.draw(tok, rng, adversarial, cap);
            if inst.prompt(tok).len() + inst.target(tok).len() <= self.max_seq_len {
                return Ok(inst);
            }
            cap = cap.saturating_sub(1).max(self.min_content);
        }
        Err(Error::Config(format!(
            "max_seq_len {} too small for the rule task",
            self.max_seq_len
        )))
    }

    pub fn instances(&self, tok: &ToyTokenizer, n: usize, seed: u64) -> Result<Vec<RuleInstance>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let adv = rng.random_bool(self.adversarial_rate);
                self.instance(tok, &mut rng, adv)
            })
            .collect()
    }
}

fn span_of(tok: &ToyTokenizer, ids: &[u32]) -> SpanBounds {
    detect_span(&tok.tokens(ids), Dialect::ChatMl)
}

/// Adapter-training corpus: prompt plus reference response, loss on the
/// response tokens only, bounds from span detection.
pub fn generate_corpus(task: &RuleTask, tok: &ToyTokenizer, n_samples: usize, seed: u64) -> Result<Vec<Sample>> {
    if n_samples == 0 {
        return Err(Error::Config("corpus needs at least one sample".into()));
    }
    Ok(task
        .instances(tok, n_samples, seed)?
        .into_iter()
        .map(|inst| {
            let prompt = inst.prompt(tok);
            let mut ids = prompt.clone();
            ids.extend(inst.target(tok));
            let loss_mask = (0..ids.len()).map(|i| i >= prompt.len()).collect();
            Sample {
                bounds: span_of(tok, &ids),
                ids,
                loss_mask,
            }
        })
        .collect())
}

/// Backbone pre-training sequences in the same format, but the response
/// opens with a uniformly random rule token: the backbone learns the chat
/// format and the copy behavior without any link to the system rule.
pub fn pretrain_corpus(task: &RuleTask, tok: &ToyTokenizer, n_samples: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dd5_eed5);
    let instances = task.instances(tok, n_samples, seed)?;
    Ok(instances
        .into_iter()
        .map(|inst| {
            let mut ids = inst.prompt(tok);
            let mut resp = inst.target(tok);
            resp[0] = tok.rule(rng.random_range(0..N_RULES));
            ids.extend(resp);
            ids
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub adherence: f64,
    pub adversarial_adherence: f64,
}

pub const ADHERENCE_HEADER: &str = "model,adherence,adversarial_adherence";

/// Fraction of `n_eval` fresh prompts (all clean or all adversarial) whose
/// greedy first response token is the system rule.
pub fn evaluate_adherence<F: Real>(
    model: &Model<F>,
    tok: &ToyTokenizer,
    task: &RuleTask,
    n_eval: usize,
    seed: u64,
    adversarial: bool,
) -> Result<f64> {
    if n_eval == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<RuleInstance> = (0..n_eval)
        .map(|_| task.instance(tok, &mut rng, adversarial))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    for chunk in instances.chunks(64) {
        let prompts: Vec<Vec<u32>> = chunk.iter().map(|i| i.prompt(tok)).collect();
        let bounds = BatchBounds::new(prompts.iter().map(|p| span_of(tok, p)).collect());
        let out = model.generate(&prompts, &bounds, 1, Some(ToyTokenizer::IM_END), ToyTokenizer::PAD)?;
        correct += chunk.iter().zip(&out).filter(|(i, r)| adheres(tok, i.rule, r)).count();
    }
    Ok(correct as f64 / n_eval as f64)
}

/// Clean and adversarial adherence on disjoint prompt sets.
pub fn adherence_report<F: Real>(
    model: &Model<F>,
    tok: &ToyTokenizer,
    task: &RuleTask,
    n_eval: usize,
    seed: u64,
) -> Result<AdherenceReport> {
    Ok(AdherenceReport {
        adherence: evaluate_adherence(model, tok, task, n_eval, seed, false)?,
        adversarial_adherence: evaluate_adherence(model, tok, task, n_eval, seed.wrapping_add(1), true)?,
    })
}
