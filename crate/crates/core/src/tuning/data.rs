//! Synthetic bimodal task. Every sample is a block of pseudo-image feature
//! vectors followed by a text prompt and its answer. Image questions are
//! answered with a fixed caption of the image's class, so the answer can
//! only be produced by reading the image. Text questions are answered by
//! reversing the prompt's content tokens.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::Modality;
use crate::error::{Error, Result};
use crate::model::{stream_rng, ModelInput};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const Q_IMAGE: usize = 1;
pub const Q_TEXT: usize = 2;
/// First id usable for prompt and answer content; lower ids are reserved.
pub const CONTENT_START: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples: usize,
    /// Prompt length including the leading question token.
    pub prompt_len: usize,
    pub answer_len: usize,
    /// Standard deviation of the per-sample noise around the class prototype.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            samples: 512,
            prompt_len: 4,
            answer_len: 4,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub class: usize,
    pub kind: QuestionKind,
    /// `image_tokens × feature_dim`, row-major.
    pub image: Vec<f64>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl SyntheticSample {
    pub fn text(&self) -> Vec<usize> {
        self.prompt.iter().chain(&self.answer).copied().collect()
    }

    /// Modality of every position of the full sequence.
    pub fn modality_tags(&self, image_tokens: usize) -> Vec<Modality> {
        let n = self.prompt.len() + self.answer.len();
        std::iter::repeat_n(Modality::Image, image_tokens)
            .chain(std::iter::repeat_n(Modality::Text, n))
            .collect()
    }
}

/// A batch ready for the model plus next-token targets and the loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub input: ModelInput,
    pub targets: Vec<usize>,
    /// True on answer positions only.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub image_tokens: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub captions: Vec<Vec<usize>>,
    pub samples: Vec<SyntheticSample>,
}

pub fn make_synthetic_dataset(
    seed: u64,
    config: &SyntheticConfig,
    image_tokens: usize,
    feature_dim: usize,
    vocab_size: usize,
) -> Result<SyntheticDataset> {
    if config.classes == 0 || config.samples == 0 {
        return Err(Error::Config("dataset needs at least one class and one sample".into()));
    }
    if config.prompt_len < 2 || config.answer_len == 0 {
        return Err(Error::Config("prompt_len must be ≥ 2 and answer_len ≥ 1".into()));
    }
    if vocab_size < CONTENT_START + 2 {
        return Err(Error::Config(format!(
            "vocab_size must be at least {}",
            CONTENT_START + 2
        )));
    }
    if image_tokens == 0 || feature_dim == 0 {
        return Err(Error::Config("image questions need image tokens".into()));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::Config("noise must be a non-negative number".into()));
    }
    let mut rng = stream_rng(seed, 7);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let width = image_tokens * feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| (0..width).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();
    let content = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(CONTENT_START..vocab_size);
    let captions: Vec<Vec<usize>> = (0..config.classes)
        .map(|_| (0..config.answer_len).map(|_| content(&mut rng)).collect())
        .collect();

    let mut samples = Vec::with_capacity(config.samples);
    for i in 0..config.samples {
        let class = i % config.classes;
        // alternate kinds per full round of classes so both stay balanced
        let kind = if (i / config.classes).is_multiple_of(2) {
            QuestionKind::Image
        } else {
            QuestionKind::Text
        };
        let image = prototypes[class]
            .iter()
            .map(|p| p + config.noise * std_normal.sample(&mut rng))
            .collect();
        let words: Vec<usize> = (1..config.prompt_len).map(|_| content(&mut rng)).collect();
        let (lead, answer) = match kind {
            QuestionKind::Image => (Q_IMAGE, captions[class].clone()),
            QuestionKind::Text => {
                let n = words.len();
                (Q_TEXT, (0..config.answer_len).map(|j| words[n - 1 - j % n]).collect())
            }
        };
        let mut prompt = vec![lead];
        prompt.extend(words);
        samples.push(SyntheticSample {
            class,
            kind,
            image,
            prompt,
            answer,
        });
    }
    samples.shuffle(&mut rng);
    Ok(SyntheticDataset {
        config: config.clone(),
        image_tokens,
        feature_dim,
        vocab_size,
        captions,
        samples,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.config.prompt_len + self.config.answer_len
    }

    pub fn seq_len(&self) -> usize {
        self.image_tokens + self.text_len()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TrainBatch> {
        if indices.is_empty() {
            return Err(Error::invalid("batch", "no samples selected"));
        }
        let mut images = Vec::with_capacity(indices.len() * self.image_tokens * self.feature_dim);
        let mut text = Vec::with_capacity(indices.len() * self.text_len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid("batch", format!("sample {i} out of range")))?;
            images.extend_from_slice(&s.image);
            text.extend(s.text());
        }
        let input = ModelInput {
            images: Tensor::new(vec![indices.len() * self.image_tokens, self.feature_dim], images)?,
            text,
            batch: indices.len(),
            image_tokens: self.image_tokens,
            text_len: self.text_len(),
        };
        let answer_start = self.image_tokens + self.config.prompt_len;
        let t = self.seq_len();
        let mask = (0..input.rows()).map(|r| r % t >= answer_start).collect();
        Ok(TrainBatch {
            targets: input.targets(),
            input,
            mask,
        })
    }

    /// Uniformly sampled batch (with replacement across calls, without
    /// replacement inside one batch when possible).
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch_size: usize) -> Result<TrainBatch> {
        let idx: Vec<usize> = if batch_size <= self.len() {
            rand::seq::index::sample(rng, self.len(), batch_size).into_vec()
        } else {
            (0..batch_size).map(|_| rng.random_range(0..self.len())).collect()
        };
        self.batch(&idx)
    }

    /// Fixed evaluation batches over the first `count·batch_size` samples.
    pub fn eval_batches(&self, batch_size: usize, count: usize) -> Result<Vec<TrainBatch>> {
        (0..count)
            .map(|c| {
                let idx: Vec<usize> = (0..batch_size).map(|j| (c * batch_size + j) % self.len()).collect();
                self.batch(&idx)
            })
            .collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.config.classes];
        self.samples.iter().for_each(|s| h[s.class] += 1);
        h
    }
}
