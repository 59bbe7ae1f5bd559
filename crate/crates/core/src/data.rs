//! Corpus loading, word-level tokenization, calibration pools and perplexity.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::model::TransformerLM;

pub const UNK: &str = "<unk>";

/// Blank-line separated documents, whitespace-normalised.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<String>,
    pub source: PathBuf,
}

impl Corpus {
    pub fn from_text(text: &str, source: impl Into<PathBuf>) -> Self {
        let mut documents = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for line in text.lines().chain(std::iter::once("")) {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    documents.push(normalize(&current.join(" ")));
                    current.clear();
                }
            } else {
                current.push(line);
            }
        }
        Self { documents, source: source.into() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let corpus = Self::from_text(&text, path);
        if corpus.documents.is_empty() {
            return Err(Error::Config(format!("corpus {} has no documents", path.display())));
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Seeded shuffle of document indices into `eval_sets` held-out groups of
    /// `docs_per_eval` documents each; the rest is training data.
    pub fn split(&self, eval_sets: usize, docs_per_eval: usize, recovery_docs: usize, seed: u64) -> Result<Split> {
        let held = eval_sets * docs_per_eval + recovery_docs;
        if held >= self.len() {
            return Err(Error::Config(format!(
                "{eval_sets} eval sets of {docs_per_eval} documents and {recovery_docs} recovery documents leave no training data ({} documents)",
                self.len()
            )));
        }
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let evals = (0..eval_sets)
            .map(|i| {
                let mut set = ids[i * docs_per_eval..(i + 1) * docs_per_eval].to_vec();
                set.sort_unstable();
                set
            })
            .collect();
        let mut recovery = ids[held - recovery_docs..held].to_vec();
        recovery.sort_unstable();
        let mut train = ids[held..].to_vec();
        train.sort_unstable();
        Ok(Split { train, evals, recovery })
    }
}

/// Document indices, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub evals: Vec<Vec<usize>>,
    /// Held out from training for adapter fine-tuning.
    pub recovery: Vec<usize>,
}

pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word-level vocabulary. Id 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Most frequent words first, ties broken lexicographically, capped so the
    /// total size including `<unk>` is at most `size`.
    pub fn build<S: AsRef<str>>(docs: &[S], size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary size must be at least 2, got {size}")));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in docs {
            for w in d.as_ref().split_whitespace() {
                if w != UNK {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = std::iter::once(UNK.to_string())
            .chain(words.into_iter().take(size - 1).map(|(w, _)| w.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::format("vocabulary", format!("first line must be {UNK}")));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::format("vocabulary", "duplicate tokens"));
        }
        Ok(vocab)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Indices of documents with at least `min_tokens` tokens, in input order.
pub fn build_pool(docs: &[Vec<u32>], min_tokens: usize, k: usize) -> Result<Vec<usize>> {
    let pool: Vec<usize> = docs
        .iter()
        .enumerate()
        .filter(|(_, d)| d.len() >= min_tokens)
        .map(|(i, _)| i)
        .collect();
    if pool.len() < k {
        return Err(Error::PoolTooSmall { pool: pool.len(), k });
    }
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    /// Indices into the tokenized training documents.
    pub sample_ids: Vec<usize>,
    pub sequences: Vec<Vec<u32>>,
}

impl CalibrationSet {
    /// Truncates each selected document to `calib_len` tokens. Documents
    /// shorter than that are rejected rather than padded.
    pub fn new(docs: &[Vec<u32>], ids: &[usize], calib_len: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let sequences = ids
            .iter()
            .map(|&i| {
                let d = docs
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("calibration sample {i} is out of range")))?;
                if d.len() < calib_len {
                    return Err(Error::Config(format!(
                        "calibration sample {i} has {} tokens, need {calib_len}",
                        d.len()
                    )));
                }
                Ok(d[..calib_len].to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Self { sample_ids: ids.to_vec(), sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn fingerprint(&self) -> String {
        let mut f = Fingerprinter::new();
        for (id, s) in self.sample_ids.iter().zip(&self.sequences) {
            f.update_u64(*id as u64);
            f.update_u64(s.len() as u64);
            for &t in s {
                f.update_u64(t as u64);
            }
        }
        f.finish()
    }
}

/// Cuts a token stream into consecutive windows of at most `len` tokens.
/// A trailing window shorter than two tokens carries no prediction and is dropped.
pub fn chunk_windows(stream: &[u32], len: usize) -> Vec<Vec<u32>> {
    stream.chunks(len.max(2)).filter(|w| w.len() >= 2).map(<[u32]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub windows: Vec<Vec<u32>>,
}

impl EvalSet {
    pub fn new(name: impl Into<String>, stream: &[u32], window: usize) -> Result<Self> {
        let name = name.into();
        let windows = chunk_windows(stream, window);
        if windows.is_empty() {
            return Err(Error::Config(format!("eval set {name} is empty")));
        }
        Ok(Self { name, windows })
    }

    /// Number of predicted tokens.
    pub fn n_targets(&self) -> usize {
        self.windows.iter().map(|w| w.len() - 1).sum()
    }
}

/// Knobs for turning a corpus into training windows, a calibration pool and eval sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub vocab_size: usize,
    pub eval_sets: usize,
    pub docs_per_eval: usize,
    /// Documents held out for recovery fine-tuning; 0 reuses the training split.
    pub recovery_docs: usize,
    pub min_tokens: usize,
    pub calib_len: usize,
    pub window: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { vocab_size: 768, eval_sets: 2, docs_per_eval: 8, recovery_docs: 8, min_tokens: 64, calib_len: 64, window: 64 }
    }
}

/// A corpus split and tokenized for the pipeline.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub split: Split,
    /// Tokenized training documents, in `split.train` order.
    pub train_docs: Vec<Vec<u32>>,
    /// Training token stream cut into model-sized windows.
    pub train_windows: Vec<Vec<u32>>,
    /// Recovery documents cut into windows, or the training windows if none are held out.
    pub recovery_windows: Vec<Vec<u32>>,
    pub evals: Vec<EvalSet>,
}

impl Dataset {
    /// Splits with `seed`, builds the vocabulary from the training split only
    /// unless `vocab` is supplied.
    pub fn prepare(corpus: &Corpus, cfg: &DataConfig, seed: u64, vocab: Option<Vocabulary>) -> Result<Self> {
        let split = corpus.split(cfg.eval_sets, cfg.docs_per_eval, cfg.recovery_docs, seed)?;
        let train_text: Vec<&str> = split.train.iter().map(|&i| corpus.documents[i].as_str()).collect();
        let vocab = match vocab {
            Some(v) => v,
            None => Vocabulary::build(&train_text, cfg.vocab_size)?,
        };
        let train_docs: Vec<Vec<u32>> = train_text.iter().map(|d| vocab.encode(d)).collect();
        let stream: Vec<u32> = train_docs.concat();
        let train_windows = chunk_windows(&stream, cfg.window);
        let recovery_windows = if split.recovery.is_empty() {
            train_windows.clone()
        } else {
            let stream: Vec<u32> = split.recovery.iter().flat_map(|&d| vocab.encode(&corpus.documents[d])).collect();
            chunk_windows(&stream, cfg.window)
        };
        let evals = split
            .evals
            .iter()
            .enumerate()
            .map(|(i, ids)| {
                let stream: Vec<u32> = ids.iter().flat_map(|&d| vocab.encode(&corpus.documents[d])).collect();
                EvalSet::new(format!("eval{i}"), &stream, cfg.window)
            })
            .collect::<Result<_>>()?;
        Ok(Self { vocab, split, train_docs, train_windows, recovery_windows, evals })
    }

    /// Training documents long enough to calibrate on.
    pub fn pool(&self, cfg: &DataConfig, k: usize) -> Result<Vec<usize>> {
        if cfg.min_tokens < cfg.calib_len {
            return Err(Error::Config(format!(
                "min_tokens ({}) must be at least the calibration length ({})",
                cfg.min_tokens, cfg.calib_len
            )));
        }
        build_pool(&self.train_docs, cfg.min_tokens, k)
    }

    /// The training split itself as one eval set, for overfitting checks.
    pub fn train_eval(&self, window: usize) -> Result<EvalSet> {
        EvalSet::new("train", &self.train_docs.concat(), window)
    }
}

/// `exp` of the token-weighted mean next-token NLL over all windows.
pub fn perplexity(model: &TransformerLM, eval: &EvalSet) -> Result<f64> {
    perplexity_with(model, None, eval)
}

pub fn perplexity_with(
    model: &TransformerLM,
    adapters: Option<&crate::model::Adapters>,
    eval: &EvalSet,
) -> Result<f64> {
    let mut nll = 0.0;
    for w in &eval.windows {
        nll += model.sequence_loss_with(adapters, w)? * (w.len() - 1) as f64;
    }
    Ok((nll / eval.n_targets() as f64).exp())
}

/// Mean perplexity over the evaluation sets.
pub fn objective_h(model: &TransformerLM, evals: &[EvalSet]) -> Result<f64> {
    objective_h_with(model, None, evals)
}

pub fn objective_h_with(
    model: &TransformerLM,
    adapters: Option<&crate::model::Adapters>,
    evals: &[EvalSet],
) -> Result<f64> {
    if evals.is_empty() {
        return Err(Error::Config("at least one eval set is required".into()));
    }
    let mut total = 0.0;
    for e in evals {
        total += perplexity_with(model, adapters, e)?;
    }
    Ok(total / evals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn documents_split_on_blank_lines() {
        let c = Corpus::from_text("a b\nc\n\n\n  d   e \n\nf\n", "x");
        assert_eq!(c.documents, vec!["a b c", "d e", "f"]);
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_word() {
        let v = Vocabulary::build(&["b a c b", "c d b"], 4).unwrap();
        assert_eq!(v.to_text(), "<unk>\nb\nc\na\n");
        assert_eq!(v.encode("d b zz"), vec![0, 1, 0]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn vocabulary_file_needs_unk_first() {
        assert!(Vocabulary::from_text("a\n<unk>\n").is_err());
        assert!(Vocabulary::from_text("<unk>\na\na\n").is_err());
    }

    #[test]
    fn pool_examples() {
        let docs: Vec<Vec<u32>> = [50, 128, 130, 200].iter().map(|&n| vec![1; n]).collect();
        assert_eq!(build_pool(&docs, 128, 3).unwrap(), vec![1, 2, 3]);
        assert_eq!(build_pool(&docs, 0, 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(build_pool(&docs, 500, 1), Err(Error::PoolTooSmall { pool: 0, k: 1 })));
        assert!(matches!(build_pool(&docs, 128, 4), Err(Error::PoolTooSmall { pool: 3, k: 4 })));
    }

    #[test]
    fn calibration_truncates_and_rejects_short() {
        let docs = vec![vec![1, 2, 3, 4], vec![5, 6]];
        let c = CalibrationSet::new(&docs, &[0], 3).unwrap();
        assert_eq!(c.sequences, vec![vec![1, 2, 3]]);
        assert!(CalibrationSet::new(&docs, &[1], 3).is_err());
        assert_ne!(c.fingerprint(), CalibrationSet::new(&docs, &[0], 2).unwrap().fingerprint());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let c = Corpus::from_text(&(0..20).map(|i| format!("w{i}")).collect::<Vec<_>>().join("\n\n"), "x");
        let s = c.split(2, 3, 4, 9).unwrap();
        assert_eq!(s, c.split(2, 3, 4, 9).unwrap());
        assert_eq!(s.recovery.len(), 4);
        let mut all: Vec<usize> = s.train.iter().chain(s.evals.iter().flatten()).chain(&s.recovery).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert!(c.split(4, 5, 0, 0).is_err());
        assert!(c.split(2, 3, 14, 0).is_err());
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = TransformerLM::new(ModelConfig::tiny(24, 8, 1, 2, 8)).unwrap();
        m.weights.tok_emb.fill(0.0);
        let e = EvalSet::new("e", &(0..40).map(|i| i % 24).collect::<Vec<u32>>(), 16).unwrap();
        assert!((perplexity(&m, &e).unwrap() - 24.0).abs() < 1e-9);
    }

    #[test]
    fn single_window_perplexity_is_exp_loss() {
        let m = TransformerLM::new(ModelConfig::tiny(24, 8, 1, 2, 8).with_seed(4)).unwrap();
        let toks: Vec<u32> = (0..12).map(|i| (i * 5) % 24).collect();
        let e = EvalSet::new("e", &toks, 16).unwrap();
        let want = m.sequence_loss(&toks).unwrap().exp();
        assert!((perplexity(&m, &e).unwrap() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn objective_is_order_invariant_mean() {
        let m = TransformerLM::new(ModelConfig::tiny(24, 8, 1, 2, 8).with_seed(4)).unwrap();
        let a = EvalSet::new("a", &[1, 2, 3, 4, 5], 16).unwrap();
        let b = EvalSet::new("b", &[7, 7, 9, 1], 16).unwrap();
        let (pa, pb) = (perplexity(&m, &a).unwrap(), perplexity(&m, &b).unwrap());
        let h = objective_h(&m, &[a.clone(), b.clone()]).unwrap();
        assert!((h - (pa + pb) / 2.0).abs() < 1e-12);
        assert_eq!(h, objective_h(&m, &[b, a]).unwrap());
        assert!(objective_h(&m, &[]).is_err());
    }

    #[test]
    fn recovery_documents_are_held_out_of_training() {
        let text: Vec<String> = (0..12).map(|i| format!("d{i} w x y z")).collect();
        let corpus = Corpus::from_text(&text.join("\n\n"), "x");
        let cfg = DataConfig { vocab_size: 50, eval_sets: 1, docs_per_eval: 2, recovery_docs: 3, min_tokens: 2, calib_len: 2, window: 4 };
        let ds = Dataset::prepare(&corpus, &cfg, 1, None).unwrap();
        assert_eq!(ds.split.recovery.len(), 3);
        assert!(ds.split.recovery.iter().all(|i| !ds.split.train.contains(i)));
        assert_ne!(ds.recovery_windows, ds.train_windows);
        let ds = Dataset::prepare(&corpus, &DataConfig { recovery_docs: 0, ..cfg }, 1, None).unwrap();
        assert_eq!(ds.recovery_windows, ds.train_windows);
    }

    #[test]
    fn dataset_keeps_eval_words_out_of_the_vocabulary() {
        let text = "a a b\n\nb c\n\nzz yy\n\nc a a";
        let corpus = Corpus::from_text(text, "x");
        let cfg = DataConfig { vocab_size: 10, eval_sets: 1, docs_per_eval: 1, recovery_docs: 0, min_tokens: 2, calib_len: 2, window: 4 };
        let ds = Dataset::prepare(&corpus, &cfg, 0, None).unwrap();
        let held = &corpus.documents[ds.split.evals[0][0]];
        for w in held.split_whitespace() {
            if !ds.split.train.iter().any(|&i| corpus.documents[i].split_whitespace().any(|x| x == w)) {
                assert_eq!(ds.vocab.id(w), 0);
            }
        }
        assert_eq!(ds.train_docs.len(), 3);
        assert!(ds.pool(&DataConfig { min_tokens: 1, ..cfg }, 1).is_err());
    }

    #[test]
    fn short_tail_windows_are_dropped() {
        assert_eq!(chunk_windows(&[1, 2, 3, 4, 5], 2), vec![vec![1, 2], vec![3, 4]]);
        assert!(EvalSet::new("e", &[3], 4).is_err());
    }
}
