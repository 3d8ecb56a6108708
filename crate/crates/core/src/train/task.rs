use serde::{Deserialize, Serialize};

use crate::autodiff::Target;
use crate::error::{Error, Result};
use crate::numerics::Prng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Predict the most frequent token of the sequence.
    MajorityToken,
    /// The sequence is a half repeated twice; masked tokens are recovered
    /// from the other copy.
    MaskedCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            kind,
            vocab,
            seq_len,
            mask_fraction: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len < 2 {
            return Err(Error::InvalidArgument("task needs vocab >= 2 and seq_len >= 2".into()));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::InvalidArgument("mask fraction must lie in (0, 1)".into()));
        }
        if self.kind == TaskKind::MaskedCopy && (self.seq_len % 2 != 0 || self.vocab < 3) {
            return Err(Error::InvalidArgument("masked copy needs an even length and vocab >= 3".into()));
        }
        Ok(())
    }

    /// Reserved mask id for [`TaskKind::MaskedCopy`].
    pub fn mask_id(&self) -> usize {
        self.vocab - 1
    }

    fn masked_count(&self) -> usize {
        let m = (self.mask_fraction * self.seq_len as f64).round() as usize;
        m.clamp(1, self.seq_len / 2)
    }
}

pub type Example = (Vec<usize>, Target);

/// Most frequent token; ties go to the smaller id.
pub fn majority_label(tokens: &[usize]) -> Option<usize> {
    let max = *tokens.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &t in tokens {
        counts[t] += 1;
    }
    let best = *counts.iter().max()?;
    counts.iter().position(|&c| c == best)
}

/// Deterministic stream of examples.
#[derive(Clone, Debug)]
pub struct TaskGenerator {
    spec: TaskSpec,
    rng: Prng,
}

pub fn make_task(spec: &TaskSpec) -> Result<TaskGenerator> {
    spec.validate()?;
    Ok(TaskGenerator {
        spec: spec.clone(),
        rng: Prng::new(spec.seed),
    })
}

impl TaskGenerator {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn batch(&mut self, size: usize) -> Vec<Example> {
        (0..size).map(|_| self.example()).collect()
    }

    pub fn example(&mut self) -> Example {
        match self.spec.kind {
            TaskKind::MajorityToken => self.majority(),
            TaskKind::MaskedCopy => self.masked_copy(),
        }
    }

    /// A sequence with a planted strict majority: the label token appears
    /// `k` times with `n/4 < k <= n/2`, every other token fewer than `k` times.
    fn majority(&mut self) -> Example {
        let (v, n) = (self.spec.vocab, self.spec.seq_len);
        let rng = &mut self.rng;
        let label = rng.below(v);
        // The other v - 1 tokens must fit below k: v k >= n + v - 1.
        let lo = (n / 4 + 1).max((n + v - 1).div_ceil(v));
        let hi = (n / 2).max(lo);
        let k = (lo + rng.below(hi - lo + 1)).min(n);
        let mut counts = vec![0usize; v];
        counts[label] = k;
        let mut tokens = vec![label; k];
        while tokens.len() < n {
            let t = rng.below(v - 1);
            let t = if t >= label { t + 1 } else { t };
            if counts[t] + 1 < k {
                counts[t] += 1;
                tokens.push(t);
            }
        }
        rng.shuffle(&mut tokens);
        let label = majority_label(&tokens).expect("non-empty");
        (tokens, Target::Sequence(label))
    }

    fn masked_copy(&mut self) -> Example {
        let n = self.spec.seq_len;
        let half = n / 2;
        let mask = self.spec.mask_id();
        let m = self.spec.masked_count();
        let rng = &mut self.rng;
        let first: Vec<usize> = (0..half).map(|_| rng.below(mask)).collect();
        let original: Vec<usize> = first.iter().chain(&first).copied().collect();
        let mut offsets: Vec<usize> = (0..half).collect();
        rng.shuffle(&mut offsets);
        let mut tokens = original.clone();
        let mut targets = vec![None; n];
        for &j in &offsets[..m] {
            let pos = j + half * rng.below(2);
            tokens[pos] = mask;
            targets[pos] = Some(original[pos]);
        }
        (tokens, Target::Positions(targets))
    }
}
