//! Byte-level corpora: file loading and the synthetic probe sets.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Largest token id a corpus may contain.
pub const MAX_BYTE: usize = 255;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: Option<String>,
    tokens: Option<Vec<usize>>,
}

/// Reads a corpus file. `.jsonl` files hold one `{"text": ...}` or
/// `{"tokens": [...]}` object per line; anything else is UTF-8 text whose
/// blank-line separated paragraphs become documents.
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<usize>>> {
    let raw = fs::read(path)?;
    let docs = if path.extension().is_some_and(|e| e == "jsonl") {
        parse_jsonl(&raw)?
    } else {
        let text = String::from_utf8(raw).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        text.split("\n\n")
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.bytes().map(usize::from).collect())
            .collect()
    };
    if docs.is_empty() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("corpus {} has no documents", path.display()),
        )
        .into());
    }
    Ok(docs)
}

fn parse_jsonl(raw: &[u8]) -> Result<Vec<Vec<usize>>> {
    let text = std::str::from_utf8(raw).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut docs = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() {
            let rec: Record =
                serde_json::from_str(body).map_err(|e| Error::format(offset, format!("corpus record: {e}")))?;
            let doc = match (rec.text, rec.tokens) {
                (Some(t), None) => t.bytes().map(usize::from).collect(),
                (None, Some(t)) => {
                    if let Some(&bad) = t.iter().find(|&&x| x > MAX_BYTE) {
                        return Err(Error::format(offset, format!("token {bad} is not a byte")));
                    }
                    t
                }
                _ => return Err(Error::format(offset, "record needs exactly one of text or tokens")),
            };
            if !doc.is_empty() {
                docs.push(doc);
            }
        }
        offset += line.len() as u64;
    }
    Ok(docs)
}

/// `count` samples of a uniformly random byte prefix followed by an exact
/// copy of it.
pub fn make_repetition_corpus(count: usize, prefix_len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let prefix: Vec<usize> = (0..prefix_len).map(|_| rng.gen_range(0..=MAX_BYTE)).collect();
            let mut s = prefix.clone();
            s.extend_from_slice(&prefix);
            s
        })
        .collect()
}

/// A haystack with one key/value needle and the prompt that asks for it.
#[derive(Clone, Debug, PartialEq)]
pub struct NeedleSample {
    pub depth: f64,
    pub document: Vec<usize>,
    /// Index of the needle's first byte in `document`.
    pub needle_start: usize,
    pub key: Vec<usize>,
    pub value: Vec<usize>,
    /// Generation prompt; the expected continuation is `value`.
    pub query: Vec<usize>,
}

const FILLER: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
const KEY_LEN: usize = 3;
const VALUE_LEN: usize = 4;

/// Needle bytes: `@` key `=` value `;`. Filler never contains `@`, `=` or
/// digits, so the needle is unambiguous.
fn needle(key: &[usize], value: &[usize]) -> Vec<usize> {
    let mut out = vec![usize::from(b'@')];
    out.extend_from_slice(key);
    out.push(usize::from(b'='));
    out.extend_from_slice(value);
    out.push(usize::from(b';'));
    out
}

pub fn needle_len() -> usize {
    KEY_LEN + VALUE_LEN + 3
}

/// For every depth, `count` lowercase-filler haystacks of `haystack_len`
/// bytes with a needle whose start sits at that relative depth.
pub fn make_needle_corpus(count: usize, haystack_len: usize, depths: &[f64], seed: u64) -> Result<Vec<NeedleSample>> {
    if let Some(d) = depths.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::arg(format!("needle depth {d} outside [0, 1]")));
    }
    if haystack_len < needle_len() {
        return Err(Error::arg(format!(
            "haystack of {haystack_len} bytes cannot hold a {}-byte needle",
            needle_len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let digit = |rng: &mut ChaCha8Rng| usize::from(b'0') + rng.gen_range(0..10);
    let mut out = Vec::with_capacity(count * depths.len());
    for &depth in depths {
        for _ in 0..count {
            let mut document: Vec<usize> = (0..haystack_len)
                .map(|_| usize::from(FILLER[rng.gen_range(0..FILLER.len())]))
                .collect();
            let key: Vec<usize> = (0..KEY_LEN).map(|_| digit(&mut rng)).collect();
            let value: Vec<usize> = (0..VALUE_LEN).map(|_| digit(&mut rng)).collect();
            let bytes = needle(&key, &value);
            let needle_start = (depth * (haystack_len - bytes.len()) as f64).round() as usize;
            document[needle_start..needle_start + bytes.len()].copy_from_slice(&bytes);
            let mut query = vec![usize::from(b'@')];
            query.extend_from_slice(&key);
            query.push(usize::from(b'='));
            out.push(NeedleSample {
                depth,
                document,
                needle_start,
                key,
                value,
                query,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    #[test]
    fn repetition_corpus_is_seeded_and_doubled() {
        let a = make_repetition_corpus(20, 24, 3);
        assert_eq!(a, make_repetition_corpus(20, 24, 3));
        assert_ne!(a, make_repetition_corpus(20, 24, 4));
        for s in &a {
            assert_eq!(s.len(), 48);
            assert_eq!(s[..24], s[24..]);
        }
    }

    #[test]
    fn random_half_has_near_maximal_entropy() {
        let corpus = make_repetition_corpus(4000, 32, 9);
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for s in &corpus {
            for &t in &s[..32] {
                *counts.entry(t).or_default() += 1;
            }
        }
        let total = (4000 * 32) as f64;
        let h: f64 = counts.values().map(|&c| -(c as f64 / total) * (c as f64 / total).ln()).sum();
        assert!((h - 256f64.ln()).abs() < 0.01, "{h}");
    }

    #[test]
    fn needles_land_at_requested_depths() {
        let s = make_needle_corpus(3, 200, &[0.0, 0.5, 1.0], 1).unwrap();
        assert_eq!(s.len(), 9);
        for x in &s {
            let bytes = needle(&x.key, &x.value);
            let found = x.document.windows(bytes.len()).position(|w| w == bytes).unwrap();
            assert_eq!(found, x.needle_start);
            let mut q = x.query.clone();
            q.extend_from_slice(&x.value);
            assert!(x.document.windows(q.len()).any(|w| w == q));
        }
        assert_eq!(s[0].needle_start, 0);
        assert_eq!(s[8].needle_start + needle_len(), 200);
        assert!(make_needle_corpus(1, 100, &[1.5], 0).is_err());
    }

    #[test]
    fn loads_text_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("c.txt");
        fs::write(&txt, "ab\n\n\ncd e\n").unwrap();
        assert_eq!(load_corpus(&txt).unwrap(), vec![vec![97, 98], vec![99, 100, 32, 101]]);
        let jl = dir.path().join("c.jsonl");
        fs::write(&jl, "{\"text\": \"hi\"}\n\n{\"tokens\": [0, 255]}\n").unwrap();
        assert_eq!(load_corpus(&jl).unwrap(), vec![vec![104, 105], vec![0, 255]]);
        fs::write(&jl, "{\"text\": \"hi\"}\n{\"tokens\": [256]}\n").unwrap();
        assert!(matches!(load_corpus(&jl), Err(Error::Format { offset: 15, .. })));
        fs::write(&txt, "\n\n").unwrap();
        assert!(matches!(load_corpus(&txt), Err(Error::Io(_))));
        assert!(matches!(load_corpus(&dir.path().join("missing")), Err(Error::Io(_))));
    }
}
