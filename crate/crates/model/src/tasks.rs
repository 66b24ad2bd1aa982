//! Synthetic next-token tasks. Every sequence starts with [`BOS`].

use oasis_core::{Error, Result, SeededRng};

pub const BOS: usize = 0;

/// Period of the repeated pattern in the copy tasks.
pub const PATTERN_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// A random pattern of [`PATTERN_LEN`] symbols repeated to fill the
    /// sequence.
    Copy,
    /// The copy pattern drawn from the lower half of the vocabulary at odd
    /// positions, alternating with uniform distractors from the upper half.
    /// Distractors carry no information about later tokens.
    NoisyCopy,
    /// Windows of a small built-in text, one id per character.
    CharLm,
}

const CORPUS: &str = "the river ran past the mill and under the old stone bridge. \
children threw bread to the ducks while the miller counted sacks of grain. \
in winter the water froze at the edges, and the wheel turned slowly, \
creaking like a tired door. when spring came the snow melted in the hills \
and the river rose, brown and quick, carrying branches down to the sea. \
the miller's daughter kept a notebook of every flood, the date, the height \
of the water on the bridge, and the names of the boats that broke loose. \
by the tenth year she could guess the spring crest within a hand's width, \
and the village asked her before they planted the low fields.\n";

const CHAR_SET: &str = "abcdefghijklmnopqrstuvwxyz .,'\n";

impl Task {
    pub const ALL: [Task; 3] = [Task::Copy, Task::NoisyCopy, Task::CharLm];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::NoisyCopy => "noisy_copy",
            Task::CharLm => "char_lm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn min_vocab(self) -> usize {
        match self {
            Task::Copy => 2,
            Task::NoisyCopy => 4,
            Task::CharLm => CHAR_SET.len() + 1,
        }
    }

    /// Content ids `1..content_end` and distractor ids `content_end..vocab`.
    pub fn content_end(vocab: usize) -> usize {
        vocab / 2
    }

    /// Is position `t` of a `noisy_copy` sequence a distractor?
    pub fn is_distractor(self, vocab: usize, token: usize) -> bool {
        self == Task::NoisyCopy && token >= Self::content_end(vocab)
    }

    pub fn sample(self, rng: &mut SeededRng, vocab: usize, len: usize) -> Result<Vec<usize>> {
        if vocab < self.min_vocab() {
            return Err(Error::Config(format!(
                "task {} needs a vocabulary of at least {}",
                self.name(),
                self.min_vocab()
            )));
        }
        if len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let mut seq = Vec::with_capacity(len);
        seq.push(BOS);
        match self {
            Task::Copy => {
                let pattern: Vec<usize> = (0..PATTERN_LEN).map(|_| 1 + rng.below(vocab - 1)).collect();
                seq.extend(pattern.iter().cycle().take(len - 1));
            }
            Task::NoisyCopy => {
                let end = Self::content_end(vocab);
                let pattern: Vec<usize> = (0..PATTERN_LEN).map(|_| 1 + rng.below(end - 1)).collect();
                for t in 1..len {
                    if t % 2 == 0 {
                        seq.push(end + rng.below(vocab - end));
                    } else {
                        seq.push(pattern[(t / 2) % PATTERN_LEN]);
                    }
                }
            }
            Task::CharLm => {
                let text: Vec<usize> = CORPUS
                    .chars()
                    .map(|c| 1 + CHAR_SET.find(c).expect("corpus character in set"))
                    .collect();
                let start = rng.below(text.len());
                seq.extend(text.iter().cycle().skip(start).take(len - 1));
            }
        }
        Ok(seq)
    }

    pub fn batch(self, rng: &mut SeededRng, vocab: usize, len: usize, n: usize) -> Result<Vec<Vec<usize>>> {
        (0..n).map(|_| self.sample(rng, vocab, len)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_repeats_pattern() {
        let mut rng = SeededRng::new(1);
        let s = Task::Copy.sample(&mut rng, 64, 32).unwrap();
        assert_eq!(s.len(), 32);
        assert_eq!(s[0], BOS);
        for t in 1 + PATTERN_LEN..32 {
            assert_eq!(s[t], s[t - PATTERN_LEN]);
        }
        assert!(s[1..].iter().all(|&x| (1..64).contains(&x)));
    }

    #[test]
    fn noisy_copy_content_follows_pattern() {
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let s = Task::NoisyCopy.sample(&mut rng, 64, 32).unwrap();
            let content: Vec<usize> = s[1..].iter().step_by(2).copied().collect();
            assert!(s[2..].iter().step_by(2).all(|&x| x >= 32));
            for i in PATTERN_LEN..content.len() {
                assert_eq!(content[i], content[i - PATTERN_LEN]);
            }
            assert!(content.iter().all(|&x| x >= 1));
            assert!(s.iter().all(|&x| x < 64));
        }
    }

    #[test]
    fn char_lm_ids_in_range() {
        let mut rng = SeededRng::new(3);
        let s = Task::CharLm.sample(&mut rng, 64, 40).unwrap();
        assert!(s[1..].iter().all(|&x| (1..=CHAR_SET.len()).contains(&x)));
        assert!(Task::CharLm.sample(&mut rng, 16, 40).is_err());
    }

    #[test]
    fn names_round_trip() {
        for t in Task::ALL {
            assert_eq!(Task::parse(t.name()), Some(t));
        }
    }
}
