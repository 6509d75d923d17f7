//! Prompt templates and response parsers for the two-stage aspect chain and
//! the LLM ranking baseline.

const PREFIX: &str = "A person bought a product and commented that ";
const MIDDLE: &str = ". Tell me from which perspectives the customer gave this review, e.g., ";
const SUFFIX: &str = ". Answer point by point.";
const DISCOVERY_CUES: &str = "quality, comfort, etc";

/// Aspect discovery prompt with the review substituted.
pub fn discovery_prompt(review: &str) -> String {
    format!("{PREFIX}{}{MIDDLE}{DISCOVERY_CUES}{SUFFIX}", review.trim())
}

/// Vocabulary-conditioned annotation prompt.
pub fn annotation_prompt<S: AsRef<str>>(review: &str, aspects: &[S]) -> String {
    let list = aspects
        .iter()
        .map(|a| a.as_ref())
        .collect::<Vec<_>>()
        .join(", ");
    format!("{PREFIX}{}{MIDDLE}{list}{SUFFIX}", review.trim())
}

/// Which of the two chain prompts a string is, with its substituted parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainPrompt {
    Discovery { review: String },
    Annotation { review: String, aspects: Vec<String> },
}

/// Inverse of [`discovery_prompt`] / [`annotation_prompt`].
pub fn parse_chain_prompt(prompt: &str) -> Option<ChainPrompt> {
    let body = prompt.strip_prefix(PREFIX)?.strip_suffix(SUFFIX)?;
    let cut = body.rfind(MIDDLE)?;
    let review = body[..cut].to_owned();
    let list = &body[cut + MIDDLE.len()..];
    if list == DISCOVERY_CUES {
        return Some(ChainPrompt::Discovery { review });
    }
    let aspects = list
        .split(',')
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .collect();
    Some(ChainPrompt::Annotation { review, aspects })
}

/// Strip a bullet or enumeration marker. Returns `None` for lines that are
/// not list entries.
fn strip_bullet(line: &str) -> Option<&str> {
    let line = line.trim_start();
    for marker in ["- ", "* ", "• ", "– "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return Some(rest);
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(r);
        }
    }
    None
}

fn clean_label(label: &str) -> String {
    label
        .replace("**", "")
        .replace('*', "")
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Split a line at inline enumeration markers (`... 2. Next`), so answers
/// squeezed onto one line still yield one entry per point.
pub(crate) fn split_points(response: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for line in response.lines() {
        let bytes = line.as_bytes();
        let mut start = 0;
        let mut k = 1;
        while k < bytes.len() {
            if bytes[k - 1].is_ascii_whitespace() && bytes[k].is_ascii_digit() {
                let mut e = k;
                while e < bytes.len() && bytes[e].is_ascii_digit() {
                    e += 1;
                }
                if e + 1 < bytes.len()
                    && (bytes[e] == b'.' || bytes[e] == b')')
                    && bytes[e + 1].is_ascii_whitespace()
                {
                    out.push(&line[start..k]);
                    start = k;
                    k = e + 1;
                    continue;
                }
            }
            k += 1;
        }
        out.push(&line[start..]);
    }
    out
}

/// Parse a point-by-point answer into aspect labels.
///
/// Each bullet or numbered entry contributes the text before its first colon
/// (or dash), lowercased. Entries without a separator count only when they
/// are short (at most four words). Duplicates are dropped, first occurrence
/// wins.
pub fn parse_aspect_list(response: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in split_points(response) {
        let Some(entry) = strip_bullet(line) else {
            continue;
        };
        let sep = [":", " - ", " – "]
            .iter()
            .filter_map(|s| entry.find(s))
            .min();
        let label = match sep {
            Some(p) => clean_label(&entry[..p]),
            None => {
                let l = clean_label(entry);
                if l.split_whitespace().count() > 4 {
                    continue;
                }
                l
            }
        };
        if label.is_empty() || label.split_whitespace().count() > 6 {
            continue;
        }
        if !out.contains(&label) {
            out.push(label);
        }
    }
    out
}

/// Phrases marking an answer line as "aspect not present".
pub const NEGATION_PATTERNS: &[&str] = &[
    "did not mention",
    "didn't mention",
    "does not mention",
    "no mention",
    "not mentioned",
    "not addressed",
    "no information",
];

pub fn is_negated(line: &str) -> bool {
    let lower = line.to_lowercase().replace('’', "'");
    NEGATION_PATTERNS.iter().any(|p| lower.contains(p))
}

/// Byte offset of the first whole-word occurrence of `needle` in `haystack`.
/// Both are expected lowercase.
pub(crate) fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let mut start = 0;
    while let Some(off) = haystack[start..].find(needle) {
        let pos = start + off;
        let end = pos + needle.len();
        let before_ok = haystack[..pos]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return Some(pos);
        }
        start = pos + haystack[pos..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

const RANK_TEMPLATE_HEAD: &str = "I want you to rate every candidate product's historical record of purchased habits. You are encouraged to learn his preferences from the historical records he has purchased. Here are The historical interactions of a user include: ";
const RANK_TEMPLATE_MID: &str = ". Now, how will the user rate these candidate products? (1 being lowest and 5 being highest) ";
const RANK_TEMPLATE_TAIL: &str = ". Importantly, the interacted items should have been excluded from the rating. Finally, Only output rating item list, which template is: 1. Swingline GBC UltraClear Thermal Laminating Pouches, Menu Size, 3 Mil, 25 Pack (item id: B00006IA2K) - Rating: 4.0 stars";

/// Ranking-baseline prompt. `history` holds `(title, rating)`, `candidates`
/// holds `(title, item_id)`.
pub fn rank_prompt(history: &[(String, f64)], candidates: &[(String, String)]) -> String {
    let history = history
        .iter()
        .map(|(t, r)| format!("{t} (rating: {r:.1})"))
        .collect::<Vec<_>>()
        .join("; ");
    let candidates = candidates
        .iter()
        .enumerate()
        .map(|(k, (t, id))| format!("{}. {t} (item id: {id})", k + 1))
        .collect::<Vec<_>>()
        .join("; ");
    format!("{RANK_TEMPLATE_HEAD}{history}{RANK_TEMPLATE_MID}{candidates}{RANK_TEMPLATE_TAIL}")
}

/// Candidate ids in prompt order, recovered from a [`rank_prompt`] string.
pub fn parse_rank_prompt_candidates(prompt: &str) -> Option<Vec<String>> {
    let start = prompt.find(RANK_TEMPLATE_MID)? + RANK_TEMPLATE_MID.len();
    let end = prompt.rfind(RANK_TEMPLATE_TAIL)?;
    let section = prompt.get(start..end)?;
    Some(item_ids_in(section).into_iter().map(|(_, id)| id).collect())
}

fn item_ids_in(text: &str) -> Vec<(usize, String)> {
    const TAG: &str = "(item id:";
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(off) = text[from..].find(TAG) {
        let s = from + off + TAG.len();
        let Some(close) = text[s..].find(')') else {
            break;
        };
        out.push((from + off, text[s..s + close].trim().to_owned()));
        from = s + close;
    }
    out
}

/// Parse `... (item id: X) - Rating: 4.0 stars` lines. Returns
/// `(item_id, rating)` in response order; a line whose rating does not parse
/// yields rating 0.
pub fn parse_rating_lines(response: &str) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for line in response.lines() {
        let ids = item_ids_in(line);
        let Some((_, id)) = ids.into_iter().next() else {
            continue;
        };
        let lower = line.to_lowercase();
        let rating = lower
            .rfind("rating")
            .map(|p| &lower[p + "rating".len()..])
            .and_then(|rest| {
                let rest = rest.trim_start_matches(|c: char| c == ':' || c.is_whitespace());
                let num: String = rest
                    .chars()
                    .take_while(|c| c.is_ascii_digit() || *c == '.')
                    .collect();
                num.parse::<f64>().ok()
            })
            .filter(|r| r.is_finite())
            .unwrap_or(0.0);
        out.push((id, rating));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discovery_prompt_is_verbatim() {
        assert_eq!(
            discovery_prompt("Nice bins"),
            "A person bought a product and commented that Nice bins. Tell me from which \
             perspectives the customer gave this review, e.g., quality, comfort, etc. Answer \
             point by point."
        );
    }

    #[test]
    fn chain_prompts_parse_back() {
        let p = discovery_prompt("It broke. Sadly");
        assert_eq!(
            parse_chain_prompt(&p),
            Some(ChainPrompt::Discovery {
                review: "It broke. Sadly".into()
            })
        );
        let p = annotation_prompt("ok", &["quality", "ease of use"]);
        assert_eq!(
            parse_chain_prompt(&p),
            Some(ChainPrompt::Annotation {
                review: "ok".into(),
                aspects: vec!["quality".into(), "ease of use".into()]
            })
        );
        assert_eq!(parse_chain_prompt("hello"), None);
    }

    #[test]
    fn parses_numbered_labels() {
        assert_eq!(
            parse_aspect_list("1. Quality: good stuff. 2. Price: cheap"),
            vec!["quality", "price"]
        );
        assert_eq!(
            parse_aspect_list("1. Quality: good stuff\n2. Price: cheap"),
            vec!["quality", "price"]
        );
    }

    #[test]
    fn parses_bullets_bold_and_skips_prose() {
        let r = "The customer gave the review from these perspectives:\n\n\
                 - **Ease of Use**: simple\n* Durability - broke quickly\n\
                 3) Design\n4. The customer really seemed to like the general look\n";
        assert_eq!(parse_aspect_list(r), vec!["ease of use", "durability", "design"]);
    }

    #[test]
    fn negation_patterns() {
        assert!(is_negated(
            "The customer did not mention anything about the ease of use of the bins."
        ));
        assert!(is_negated("Price: Not mentioned."));
        assert!(is_negated("The customer didn’t mention comfort"));
        assert!(!is_negated(
            "The customer mentioned that the bins were not durable and that the fabric \
             disintegrated when burned with a candle."
        ));
    }

    #[test]
    fn word_search_respects_boundaries() {
        assert_eq!(find_word("priced well, price ok", "price"), Some(13));
        assert_eq!(find_word("ease of use: fine", "ease of use"), Some(0));
        assert_eq!(find_word("usefulness", "use"), None);
    }

    #[test]
    fn rating_lines() {
        let r = "1. Pens (item id: A1) - Rating: 4.5 stars\n2. Paper (item id: B2) - Rating: n/a\nnoise";
        assert_eq!(
            parse_rating_lines(r),
            vec![("A1".to_string(), 4.5), ("B2".to_string(), 0.0)]
        );
        let p = rank_prompt(
            &[("Stapler".into(), 5.0)],
            &[("Pens".into(), "A1".into()), ("Paper".into(), "B2".into())],
        );
        assert!(p.starts_with("I want you to rate every candidate product's"));
        assert_eq!(parse_rank_prompt_candidates(&p).unwrap(), vec!["A1", "B2"]);
    }
}
