//! Synthetic tasks with binary, exactly checkable rewards.
//!
//! Every task uses BOS = 0 and EOS = 1. Prompts start with BOS.
//!
//! * `ModSum`: digits `0..D` at ids `2..2+D` with `D = |V| - 2`. Prompt
//!   `[BOS, a, b]`, answer `[(a + b) mod D, EOS]`.
//! * `Reverse`: symbols at ids `2..|V|`. Prompt `[BOS, s_1 .. s_n]`, answer
//!   `[s_n .. s_1, EOS]`.
//! * `CountdownMini` (|V| = 20): digits 1..9 at ids 2..=10, `+ - *` at
//!   11..=13 and six target symbols at 14..=19 standing for the values 1..=6.
//!   Prompt `[BOS, o_1, o_2, o_3, T]`: three operand digits then the target
//!   last. The answer is any well-formed RPN expression over digits and
//!   operators (at most `answer_len` tokens) that evaluates to the target,
//!   followed by EOS. Operands are context only; the checker accepts any
//!   digits.
//!
//! A completion earns reward 1 only if it terminates with EOS right after a
//! correct answer.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Token, Vocab};
use crate::rng::{Domain, Stream};

pub const BOS: Token = 0;
pub const EOS: Token = 1;

const CD_DIGIT0: Token = 2; // digit 1
const CD_PLUS: Token = 11;
const CD_MINUS: Token = 12;
const CD_TIMES: Token = 13;
const CD_TARGET0: Token = 14; // value 1
const CD_TARGETS: usize = 6;
const CD_VOCAB: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    ModSum,
    Reverse,
    CountdownMini,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: TaskName,
    pub vocab_size: usize,
    /// Content tokens after BOS.
    pub prompt_len: usize,
    /// Answer tokens before EOS (maximum RPN length for CountdownMini).
    pub answer_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn default_for(name: TaskName) -> Self {
        match name {
            TaskName::ModSum => TaskSpec {
                name,
                vocab_size: 12,
                prompt_len: 2,
                answer_len: 1,
                train_size: 64,
                val_size: 16,
                seed: 0,
            },
            TaskName::Reverse => TaskSpec {
                name,
                vocab_size: 6,
                prompt_len: 3,
                answer_len: 3,
                train_size: 48,
                val_size: 16,
                seed: 0,
            },
            TaskName::CountdownMini => TaskSpec {
                name,
                vocab_size: CD_VOCAB,
                prompt_len: 4,
                answer_len: 3,
                train_size: 256,
                val_size: 64,
                seed: 0,
            },
        }
    }

    /// Longest completion the sampler may produce: the answer plus EOS.
    pub fn max_len(&self) -> usize {
        self.answer_len + 1
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    spec: TaskSpec,
    vocab: Vocab,
    train: Vec<Vec<Token>>,
    val: Vec<Vec<Token>>,
}

fn infeasible(key: &str, msg: impl Into<String>) -> Error {
    Error::config(format!("task.{key}"), msg)
}

/// Draws `n` distinct content tuples from a universe of `universe` items
/// decoded by `decode`.
fn draw_distinct(universe: u64, n: usize, rng: &mut Stream, decode: impl Fn(u64) -> Vec<Token>) -> Vec<Vec<Token>> {
    if universe <= 100_000 {
        let mut all: Vec<u64> = (0..universe).collect();
        rng.shuffle(&mut all);
        all.truncate(n);
        all.into_iter().map(decode).collect()
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let code = rng.below(universe);
            if seen.insert(code) {
                out.push(decode(code));
            }
        }
        out
    }
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let vocab = Vocab::standard(spec.vocab_size).map_err(|e| infeasible("vocab_size", e.to_string()))?;
        let need = spec.train_size + spec.val_size;
        if spec.train_size == 0 {
            return Err(infeasible("train_size", "must be positive"));
        }
        let mut rng = Stream::new(spec.seed, Domain::TaskBuild, 0);
        let prompts = match spec.name {
            TaskName::ModSum => {
                if spec.vocab_size < 4 {
                    return Err(infeasible("vocab_size", "ModSum needs at least two digits"));
                }
                if spec.prompt_len != 2 || spec.answer_len != 1 {
                    return Err(infeasible("prompt_len", "ModSum uses prompt_len = 2, answer_len = 1"));
                }
                let d = (spec.vocab_size - 2) as u64;
                if (need as u64) > d * d {
                    return Err(infeasible(
                        "train_size",
                        format!("ModSum has only {} distinct prompts", d * d),
                    ));
                }
                draw_distinct(d * d, need, &mut rng, |c| {
                    vec![BOS, 2 + (c / d) as Token, 2 + (c % d) as Token]
                })
            }
            TaskName::Reverse => {
                if spec.vocab_size < 3 || spec.prompt_len == 0 {
                    return Err(infeasible("prompt_len", "Reverse needs symbols and a nonempty prompt"));
                }
                if spec.answer_len != spec.prompt_len {
                    return Err(infeasible("answer_len", "Reverse requires answer_len = prompt_len"));
                }
                let s = (spec.vocab_size - 2) as u64;
                let universe = s.checked_pow(spec.prompt_len as u32).unwrap_or(u64::MAX);
                if (need as u64) > universe {
                    return Err(infeasible(
                        "train_size",
                        format!("Reverse has only {universe} distinct prompts"),
                    ));
                }
                let n = spec.prompt_len;
                draw_distinct(universe, need, &mut rng, |mut c| {
                    let mut p = vec![BOS];
                    for _ in 0..n {
                        p.push(2 + (c % s) as Token);
                        c /= s;
                    }
                    p
                })
            }
            TaskName::CountdownMini => {
                if spec.vocab_size != CD_VOCAB {
                    return Err(infeasible("vocab_size", "CountdownMini uses a 20-symbol vocab"));
                }
                if spec.prompt_len != 4 {
                    return Err(infeasible(
                        "prompt_len",
                        "CountdownMini prompts are 3 operands + target",
                    ));
                }
                if spec.answer_len == 0 || spec.answer_len.is_multiple_of(2) {
                    return Err(infeasible("answer_len", "RPN length must be odd"));
                }
                let universe = 9u64 * 9 * 9 * CD_TARGETS as u64;
                if (need as u64) > universe {
                    return Err(infeasible(
                        "train_size",
                        format!("CountdownMini has only {universe} distinct prompts"),
                    ));
                }
                draw_distinct(universe, need, &mut rng, |c| {
                    let t = c % CD_TARGETS as u64;
                    let ops = c / CD_TARGETS as u64;
                    vec![
                        BOS,
                        CD_DIGIT0 + (ops % 9) as Token,
                        CD_DIGIT0 + (ops / 9 % 9) as Token,
                        CD_DIGIT0 + (ops / 81) as Token,
                        CD_TARGET0 + t as Token,
                    ]
                })
            }
        };
        let mut prompts = prompts;
        let val = prompts.split_off(spec.train_size);
        Ok(Task {
            spec,
            vocab,
            train: prompts,
            val,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn train(&self) -> &[Vec<Token>] {
        &self.train
    }

    pub fn val(&self) -> &[Vec<Token>] {
        &self.val
    }

    pub fn max_len(&self) -> usize {
        self.spec.max_len()
    }

    /// Binary exact-match reward of a completion for a prompt.
    pub fn reward(&self, prompt: &[Token], completion: &[Token]) -> f64 {
        let Some(eos_at) = completion.iter().position(|&t| t == EOS) else {
            return 0.0;
        };
        if eos_at + 1 != completion.len() {
            return 0.0;
        }
        let body = &completion[..eos_at];
        let ok = match self.spec.name {
            TaskName::ModSum => {
                let d = (self.spec.vocab_size - 2) as Token;
                prompt.len() == 3 && body == [2 + (prompt[1] - 2 + prompt[2] - 2) % d]
            }
            TaskName::Reverse => body.iter().eq(prompt[1..].iter().rev()),
            TaskName::CountdownMini => {
                body.len() <= self.spec.answer_len
                    && prompt
                        .last()
                        .is_some_and(|&t| eval_rpn(body) == Some(i64::from(t - CD_TARGET0) + 1))
            }
        };
        if ok {
            1.0
        } else {
            0.0
        }
    }

    /// A completion known to earn reward 1.
    pub fn reference_answer(&self, prompt: &[Token]) -> Vec<Token> {
        let mut ans = match self.spec.name {
            TaskName::ModSum => {
                let d = (self.spec.vocab_size - 2) as Token;
                vec![2 + (prompt[1] - 2 + prompt[2] - 2) % d]
            }
            TaskName::Reverse => prompt[1..].iter().rev().copied().collect(),
            TaskName::CountdownMini => {
                let value = prompt[prompt.len() - 1] - CD_TARGET0 + 1;
                vec![CD_DIGIT0 + value - 1]
            }
        };
        ans.push(EOS);
        ans
    }

    pub fn accuracy_on(&self, params: &PolicyParams, prompts: &[Vec<Token>]) -> f64 {
        let hits: f64 = prompts
            .iter()
            .map(|p| self.reward(p, &params.greedy(p, self.max_len())))
            .sum();
        hits / prompts.len() as f64
    }

    /// Greedy-decoding accuracy over the validation split.
    pub fn validation_accuracy(&self, params: &PolicyParams) -> Result<f64> {
        if self.val.is_empty() {
            return Err(Error::config("task.val_size", "validation set is empty"));
        }
        Ok(self.accuracy_on(params, &self.val))
    }
}

/// Evaluates a CountdownMini RPN body; `None` if malformed.
pub fn eval_rpn(tokens: &[Token]) -> Option<i64> {
    let mut stack: Vec<i64> = Vec::new();
    for &t in tokens {
        match t {
            CD_DIGIT0..=10 => stack.push(i64::from(t - CD_DIGIT0) + 1),
            CD_PLUS | CD_MINUS | CD_TIMES => {
                let b = stack.pop()?;
                let a = stack.pop()?;
                stack.push(match t {
                    CD_PLUS => a + b,
                    CD_MINUS => a - b,
                    _ => a * b,
                });
            }
            _ => return None,
        }
    }
    match stack.as_slice() {
        [v] => Some(*v),
        _ => None,
    }
}

pub fn make_task(spec: TaskSpec) -> Result<Task> {
    Task::new(spec)
}
