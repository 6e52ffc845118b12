use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbedIndexError, EmbeddingVector};
use crate::text::fold_accents;

pub const MOCK_DEFAULT_DIM: usize = 256;

/// Source of text embeddings with a fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Raw vectors for non-empty texts, one per input, in order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedIndexError>;
}

/// Embeds one text: the zero sentinel for blank text, otherwise the
/// provider's vector scaled to unit norm.
pub fn embed(text: &str, provider: &dyn EmbeddingProvider) -> Result<EmbeddingVector, EmbedIndexError> {
    Ok(embed_all(&[text], provider)?.remove(0))
}

pub fn embed_all(texts: &[&str], provider: &dyn EmbeddingProvider) -> Result<Vec<EmbeddingVector>, EmbedIndexError> {
    let dim = provider.dim();
    let non_blank: Vec<&str> = texts.iter().copied().filter(|t| !t.trim().is_empty()).collect();
    let mut raw = if non_blank.is_empty() {
        Vec::new().into_iter()
    } else {
        let vectors = provider.embed_batch(&non_blank)?;
        if vectors.len() != non_blank.len() {
            return Err(EmbedIndexError::ProviderFailure(format!(
                "provider returned {} vectors for {} texts",
                vectors.len(),
                non_blank.len()
            )));
        }
        vectors.into_iter()
    };
    let mut out = Vec::with_capacity(texts.len());
    for text in texts {
        if text.trim().is_empty() {
            out.push(EmbeddingVector::zeros(dim));
            continue;
        }
        let v = raw.next().expect("one vector per non-blank text");
        if v.len() != dim {
            return Err(EmbedIndexError::DimMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedIndexError::ProviderFailure("non-finite vector component".into()));
        }
        out.push(EmbeddingVector::normalized(v));
    }
    Ok(out)
}

/// Offline deterministic provider: signed feature hashing of word unigrams
/// and bigrams (lowercased, accent-folded) into a fixed number of buckets.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    id: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            id: format!("hash-ngram-v1-{dim}"),
        }
    }

    fn features(text: &str) -> Vec<String> {
        let folded = fold_accents(&text.to_lowercase());
        let words: Vec<&str> = folded
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return vec![format!("raw:{}", folded.trim())];
        }
        let mut feats: Vec<String> = words.iter().map(|w| format!("u:{w}")).collect();
        feats.extend(words.windows(2).map(|p| format!("b:{} {}", p[0], p[1])));
        feats
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for f in Self::features(text) {
            let h = fnv1a64(f.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            // every feature cancelled out; fall back to one bucket for the text
            let h = fnv1a64(text.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(MOCK_DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedIndexError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Remote provider: `POST {"texts": [..]}` → `{"vectors": [[..]]}`.
pub struct HttpEmbedder {
    id: String,
    endpoint: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, dim: usize, timeout: Duration) -> Result<Self, EmbedIndexError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedIndexError::ProviderFailure(e.to_string()))?;
        Ok(Self {
            id: id.into(),
            endpoint: endpoint.into(),
            dim,
            client,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedIndexError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { texts })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| EmbedIndexError::ProviderFailure(e.to_string()))?;
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| EmbedIndexError::ProviderFailure(format!("bad response body: {e}")))?;
        Ok(body.vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_index::cosine;

    #[test]
    fn empty_text_is_zero_sentinel() {
        let p = HashingEmbedder::default();
        let v = embed("", &p).unwrap();
        assert_eq!(v.dim(), 256);
        assert!(v.is_zero());
        assert!(embed("   ", &p).unwrap().is_zero());
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let p = HashingEmbedder::default();
        let a = embed("Adenocarcinoma de pulmón, EGFR positivo.", &p).unwrap();
        let b = embed("Adenocarcinoma de pulmón, EGFR positivo.", &p).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() <= 1e-6);
        assert_eq!(cosine(&a, &b).unwrap(), 1.0);
        for t in ["x", "?!", "ECOG 1", "radioterapia radical"] {
            let v = embed(t, &p).unwrap();
            assert!((v.norm() - 1.0).abs() <= 1e-6, "{t}");
        }
    }

    #[test]
    fn related_texts_score_higher() {
        let p = HashingEmbedder::default();
        let q = embed("radioterapia previa", &p).unwrap();
        let near = embed("recibió radioterapia torácica previa", &p).unwrap();
        let far = embed("PD-L1 del 45% en células tumorales", &p).unwrap();
        assert!(cosine(&q, &near).unwrap() > cosine(&q, &far).unwrap());
    }

    struct WrongDim;
    impl EmbeddingProvider for WrongDim {
        fn provider_id(&self) -> &str {
            "wrong"
        }
        fn dim(&self) -> usize {
            4
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedIndexError> {
            Ok(texts.iter().map(|_| vec![1.0; 3]).collect())
        }
    }

    #[test]
    fn provider_dim_is_checked() {
        assert!(matches!(embed("hola", &WrongDim), Err(EmbedIndexError::DimMismatch { .. })));
    }

    #[test]
    fn unreachable_http_provider_fails() {
        let p = HttpEmbedder::new("remote", "http://127.0.0.1:9/embed", 8, Duration::from_millis(500)).unwrap();
        assert!(matches!(embed("hola", &p), Err(EmbedIndexError::ProviderFailure(_))));
    }
}
