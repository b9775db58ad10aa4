//! Temperature sampling, the unbiased pass@k estimator, evaluation reports and
//! response-entropy measurement.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoder, ParameterSet, TokenId};
use crate::numerics::ops::log_softmax_row;
use crate::selection::entropy_unchecked;
use crate::tasks::{verify, Sample, Vocabulary, EOS};

/// How to pick each next token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub temperature: f64,
    /// Most tokens to generate after the prompt.
    pub max_len: usize,
    /// Take the argmax (lowest id on ties) instead of sampling.
    pub greedy: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_len: 40,
            greedy: false,
        }
    }
}

impl SamplingOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A generated continuation with per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Generated ids, ending in `EOS` when the model emitted one.
    pub tokens: Vec<TokenId>,
    /// `log π(token)` under the temperature-scaled sampling distribution.
    pub logprobs: Vec<f64>,
    /// Entropy in nats of each step's sampling distribution.
    pub entropies: Vec<f64>,
}

/// Draws an index from a row of log-probabilities by inverse CDF.
fn draw<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum: last non-zero entry
    log_probs
        .iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(log_probs.len() - 1)
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Generates a continuation of `prompt` until `EOS`, `max_len` tokens, or the
/// context limit.
pub fn sample_with<R: Rng + ?Sized>(
    params: &ParameterSet,
    prompt: &[TokenId],
    opts: &SamplingOptions,
    rng: &mut R,
) -> Result<Rollout> {
    opts.validate()?;
    let context = params.config().context_len;
    let mut dec = Decoder::new(params);
    let mut logits = dec.prefill(prompt)?;
    let v = logits.len();
    let mut out = Rollout {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        entropies: Vec::new(),
    };
    let mut lp = vec![0.0; v];
    let inv_t = 1.0 / opts.temperature;
    while out.tokens.len() < opts.max_len {
        for z in logits.iter_mut() {
            *z *= inv_t;
        }
        log_softmax_row(&logits, &mut lp);
        let next = if opts.greedy { argmax(&lp) } else { draw(&lp, rng) };
        out.tokens.push(next as TokenId);
        out.logprobs.push(lp[next]);
        out.entropies.push(entropy_unchecked(&lp));
        if next as TokenId == EOS || dec.len() >= context {
            break;
        }
        logits = dec.push(next as TokenId)?;
    }
    Ok(out)
}

/// Seeded ancestral sampling of a continuation of `prompt`.
pub fn sample(
    params: &ParameterSet,
    prompt: &[TokenId],
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let opts = SamplingOptions {
        temperature,
        max_len,
        greedy: false,
    };
    Ok(sample_with(params, prompt, &opts, &mut ChaCha8Rng::seed_from_u64(seed))?.tokens)
}

/// Argmax continuation of `prompt`.
pub fn greedy(params: &ParameterSet, prompt: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    let opts = SamplingOptions {
        temperature: 1.0,
        max_len,
        greedy: true,
    };
    Ok(sample_with(params, prompt, &opts, &mut ChaCha8Rng::seed_from_u64(0))?.tokens)
}

/// Random stream for prompt `index` of a seeded evaluation.
pub fn prompt_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Unbiased `pass@k = 1 − C(n−c, k)/C(n, k)` as `1 − Π_{i=n−c+1}^{n} (1 − k/i)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Input(format!("pass@k needs 1 ≤ k ≤ n, got k = {k}, n = {n}")));
    }
    if c > n {
        return Err(Error::Input(format!("{c} correct out of {n} samples")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut fail = 1.0;
    for i in n - c + 1..=n {
        fail *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - fail)
}

/// Settings of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_per_prompt: usize,
    pub ks: Vec<usize>,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_prompt: 32,
            ks: vec![1, 4, 8, 16, 32],
            temperature: 1.0,
            max_len: 64,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let max_k = self.ks.iter().copied().max().unwrap_or(0);
        if self.ks.is_empty() || self.ks.contains(&0) || self.n_per_prompt < max_k {
            return Err(Error::Config(format!(
                "need 1 ≤ k ≤ n_per_prompt for every k (ks {:?}, n {})",
                self.ks, self.n_per_prompt
            )));
        }
        self.sampling().validate()
    }

    fn sampling(&self) -> SamplingOptions {
        SamplingOptions {
            temperature: self.temperature,
            max_len: self.max_len,
            greedy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub prompt: String,
    pub n: usize,
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_prompt: Vec<PromptResult>,
    /// Mean over prompts of pass@k, keyed by k.
    pub pass_at_k: BTreeMap<usize, f64>,
    /// Mean fraction of correct samples, equal to pass@1.
    pub avg_at_n: f64,
    /// Mean per-step entropy of the sampled responses, nats.
    pub mean_response_entropy: f64,
    /// Mean number of generated tokens per sample.
    pub mean_response_len: f64,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// One CSV row per k, tagged with `label` (usually the checkpoint).
    pub fn write_csv(&self, path: &Path, label: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "checkpoint",
            "k",
            "pass_at_k",
            "avg_at_n",
            "mean_response_entropy",
            "n_per_prompt",
            "n_prompts",
        ])?;
        for (k, p) in &self.pass_at_k {
            w.write_record([
                label.to_string(),
                k.to_string(),
                p.to_string(),
                self.avg_at_n.to_string(),
                self.mean_response_entropy.to_string(),
                self.config.n_per_prompt.to_string(),
                self.per_prompt.len().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Samples `n_per_prompt` responses per prompt, verifies them and aggregates pass@k.
pub fn evaluate(
    params: &ParameterSet,
    eval_set: &[Sample],
    config: &EvalConfig,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    config.validate()?;
    let opts = config.sampling();
    let mut per_prompt = Vec::with_capacity(eval_set.len());
    let mut ent_sum = 0.0;
    let mut ent_n = 0usize;
    let mut samples = 0usize;
    for (i, s) in eval_set.iter().enumerate() {
        let mut rng = prompt_rng(config.seed, i);
        let mut c = 0;
        for _ in 0..config.n_per_prompt {
            let r = sample_with(params, &s.prompt_tokens, &opts, &mut rng)?;
            if verify(s, &r.tokens, vocab) {
                c += 1;
            }
            ent_sum += r.entropies.iter().sum::<f64>();
            ent_n += r.entropies.len();
            samples += 1;
        }
        per_prompt.push(PromptResult {
            prompt: vocab.detokenize(&s.prompt_tokens[1..]),
            n: config.n_per_prompt,
            c,
        });
    }
    let mut pass = BTreeMap::new();
    for &k in &config.ks {
        let mut total = 0.0;
        for p in &per_prompt {
            total += pass_at_k(p.n, p.c, k)?;
        }
        pass.insert(k, total / per_prompt.len() as f64);
    }
    let avg_at_n = per_prompt.iter().map(|p| p.c as f64 / p.n as f64).sum::<f64>() / per_prompt.len() as f64;
    Ok(EvalReport {
        config: config.clone(),
        per_prompt,
        pass_at_k: pass,
        avg_at_n,
        mean_response_entropy: if ent_n == 0 { 0.0 } else { ent_sum / ent_n as f64 },
        mean_response_len: ent_n as f64 / samples as f64,
    })
}

/// Token-weighted mean next-token entropy along `n` sampled responses per prompt.
pub fn mean_response_entropy(
    params: &ParameterSet,
    prompts: &[Vec<TokenId>],
    n: usize,
    opts: &SamplingOptions,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("need at least one sample per prompt".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, p) in prompts.iter().enumerate() {
        let mut rng = prompt_rng(seed, i);
        for _ in 0..n {
            let r = sample_with(params, p, opts, &mut rng)?;
            sum += r.entropies.iter().sum::<f64>();
            count += r.entropies.len();
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{next_token_logits, ModelConfig};
    use crate::tasks::BOS;

    fn tiny_model(seed: u64) -> ParameterSet {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 32,
            seed,
        };
        ParameterSet::init(&cfg).unwrap()
    }

    /// Subset-enumeration oracle: fraction of k-subsets with a correct sample.
    fn enumerate_pass(n: usize, c: usize, k: usize) -> f64 {
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize == k {
                total += 1;
                if mask & ((1u32 << c) - 1) != 0 {
                    hit += 1;
                }
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(4, 4, 1).unwrap(), 1.0);
        for k in 1..=10 {
            assert_eq!(pass_at_k(10, 0, k).unwrap(), 0.0);
        }
        assert!((pass_at_k(4, 1, 2).unwrap() - 0.5).abs() < 1e-15);
        assert!((pass_at_k(4, 1, 2).unwrap() - enumerate_pass(4, 1, 2)).abs() < 1e-15);
        assert!(matches!(pass_at_k(3, 1, 4), Err(Error::Input(_))));
        for n in 1..=8 {
            for c in 0..=n {
                assert!((pass_at_k(n, c, 1).unwrap() - c as f64 / n as f64).abs() < 1e-15);
                let mut prev = 0.0;
                for k in 1..=n {
                    let p = pass_at_k(n, c, k).unwrap();
                    assert!(p + 1e-15 >= prev);
                    prev = p;
                }
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = tiny_model(1);
        let a = sample(&p, &[BOS, 5, 6], 1.0, 20, 9).unwrap();
        assert_eq!(a, sample(&p, &[BOS, 5, 6], 1.0, 20, 9).unwrap());
        assert!(a.len() <= 20);
        assert!(matches!(sample(&p, &[BOS], 0.0, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn greedy_follows_argmax() {
        let p = tiny_model(2);
        let prompt = vec![BOS, 7];
        let out = greedy(&p, &prompt, 6).unwrap();
        let mut seq = prompt.clone();
        for &tok in &out {
            let z = next_token_logits(&p, &seq).unwrap();
            assert_eq!(tok as usize, argmax(&z));
            seq.push(tok);
        }
    }

    #[test]
    fn first_token_frequencies_match_softmax() {
        let mut p = tiny_model(3);
        // sharpen the head so the distribution is far from uniform
        let flat: Vec<f64> = p.flatten().iter().map(|x| x * 40.0).collect();
        p = p.with_flat(&flat).unwrap();
        let prompt = [BOS, 9, 4];
        let z = next_token_logits(&p, &prompt).unwrap();
        let mut lp = vec![0.0; z.len()];
        log_softmax_row(&z, &mut lp);
        let draws = 100_000;
        let mut counts = vec![0usize; z.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let opts = SamplingOptions {
            max_len: 1,
            ..SamplingOptions::default()
        };
        for _ in 0..draws {
            let r = sample_with(&p, &prompt, &opts, &mut rng).unwrap();
            counts[r.tokens[0] as usize] += 1;
        }
        for (j, &cnt) in counts.iter().enumerate() {
            let q = lp[j].exp();
            let sd = (draws as f64 * q * (1.0 - q)).sqrt();
            assert!(
                (cnt as f64 - draws as f64 * q).abs() <= 4.0 * sd + 1e-9,
                "token {j}: {cnt} vs {}",
                draws as f64 * q
            );
        }
    }

    #[test]
    fn entropy_of_untrained_model_is_near_max() {
        let p = tiny_model(5);
        let prompts = vec![vec![BOS, 4, 5], vec![BOS, 8]];
        let h = mean_response_entropy(&p, &prompts, 8, &SamplingOptions::default(), 1).unwrap();
        assert!(h > 0.95 * 32f64.ln() && h <= 32f64.ln(), "{h}");
    }

    proptest::proptest! {
        #[test]
        fn pass_at_k_is_a_probability_monotone_in_k_and_c(n in 1usize..40, c_frac in 0.0f64..=1.0) {
            let c = (c_frac * n as f64).floor() as usize;
            let mut prev = 0.0;
            for k in 1..=n {
                let p = pass_at_k(n, c, k).unwrap();
                proptest::prop_assert!((0.0..=1.0).contains(&p));
                proptest::prop_assert!(p >= prev - 1e-15);
                if c < n {
                    proptest::prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= p - 1e-15);
                }
                prev = p;
            }
        }
    }
}
