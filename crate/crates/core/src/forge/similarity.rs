use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// How text is cut into tokens before comparing sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Identifier, keyword and number tokens.
    #[default]
    Word,
    /// Every 5-character window of the whitespace-collapsed text.
    #[serde(rename = "char5gram")]
    Char5Gram,
}

fn comment_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)/\*.*?\*/|//[^\n]*").unwrap())
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z0-9_$]+").unwrap())
}

pub fn strip_comments(text: &str) -> String {
    comment_re().replace_all(text, " ").into_owned()
}

/// Token set of `text` after comment stripping.
pub fn token_set(text: &str, granularity: Granularity) -> BTreeSet<String> {
    let text = strip_comments(text);
    match granularity {
        Granularity::Word => word_re()
            .find_iter(&text)
            .map(|m| m.as_str().to_string())
            .collect(),
        Granularity::Char5Gram => {
            let flat: Vec<char> = text.split_whitespace().collect::<Vec<_>>().join(" ").chars().collect();
            if flat.is_empty() {
                BTreeSet::new()
            } else if flat.len() < 5 {
                BTreeSet::from([flat.iter().collect()])
            } else {
                flat.windows(5).map(|w| w.iter().collect()).collect()
            }
        }
    }
}

/// |A ∩ B| / |A ∪ B|, with two empty sets counting as identical.
pub fn jaccard_sets<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// ```
/// use hdlagent::forge::{jaccard, Granularity};
///
/// assert_eq!(jaccard("a b c", "b c d", Granularity::Word), 0.5);
/// assert_eq!(jaccard("", "", Granularity::Word), 1.0);
/// ```
pub fn jaccard(a: &str, b: &str, granularity: Granularity) -> f64 {
    jaccard_sets(&token_set(a, granularity), &token_set(b, granularity))
}

/// Golden token sets with an inverted index, so a script is only compared
/// against references that share at least one token with it.
pub struct GoldenIndex {
    ids: Vec<String>,
    sizes: Vec<usize>,
    postings: HashMap<String, Vec<usize>>,
    granularity: Granularity,
}

/// Most similar reference for one script.
#[derive(Debug, Clone, PartialEq)]
pub struct Closest {
    pub golden_id: String,
    pub similarity: f64,
}

impl GoldenIndex {
    pub fn build<'a>(
        golden: impl IntoIterator<Item = (&'a str, &'a str)>,
        granularity: Granularity,
    ) -> Self {
        let mut index = Self {
            ids: Vec::new(),
            sizes: Vec::new(),
            postings: HashMap::new(),
            granularity,
        };
        for (id, text) in golden {
            let g = index.ids.len();
            let set = token_set(text, granularity);
            index.ids.push(id.to_string());
            index.sizes.push(set.len());
            for t in set {
                index.postings.entry(t).or_default().push(g);
            }
        }
        index
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Highest similarity over all references; ties go to the earlier one.
    pub fn closest(&self, text: &str) -> Option<Closest> {
        let set = token_set(text, self.granularity);
        let mut inter = vec![0usize; self.ids.len()];
        for t in &set {
            if let Some(list) = self.postings.get(t) {
                for &g in list {
                    inter[g] += 1;
                }
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for g in 0..self.ids.len() {
            let sim = if set.is_empty() && self.sizes[g] == 0 {
                1.0
            } else {
                let union = set.len() + self.sizes[g] - inter[g];
                inter[g] as f64 / union as f64
            };
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((g, sim));
            }
        }
        best.map(|(g, similarity)| Closest {
            golden_id: self.ids[g].clone(),
            similarity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(jaccard("x y", "x y", Granularity::Word), 1.0);
        assert_eq!(jaccard("a b", "c d", Granularity::Word), 0.0);
        assert_eq!(jaccard("a b c", "b c d", Granularity::Word), 0.5);
        assert_eq!(jaccard("a // b c d", "a", Granularity::Word), 1.0);
        assert_eq!(jaccard("a /* b\nc */ d", "a d", Granularity::Word), 1.0);
    }

    #[test]
    fn char_grams() {
        let s = token_set("abcdef", Granularity::Char5Gram);
        assert_eq!(s.len(), 2);
        assert_eq!(token_set("ab", Granularity::Char5Gram).len(), 1);
        assert_eq!(jaccard("module  x", "module x", Granularity::Char5Gram), 1.0);
    }

    #[test]
    fn index_agrees_with_pairwise() {
        let golden = [("g0", "a b c d"), ("g1", "x y z"), ("g2", "")];
        let idx = GoldenIndex::build(golden, Granularity::Word);
        for text in ["a b c d e", "x y", "q", ""] {
            let c = idx.closest(text).unwrap();
            let brute = golden
                .iter()
                .map(|(_, g)| jaccard(text, g, Granularity::Word))
                .fold(f64::MIN, f64::max);
            assert_eq!(c.similarity, brute, "{text}");
        }
        assert_eq!(idx.closest("").unwrap().golden_id, "g2");
    }
}
