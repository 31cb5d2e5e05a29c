//! The one string-matching rule shared by every stage: trim, then Unicode
//! lowercase. Mentions additionally respect alphanumeric word boundaries.

/// Canonical form used for all equality checks between surfaces.
pub fn canonical(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn same(a: &str, b: &str) -> bool {
    canonical(a) == canonical(b)
}

/// A mention of a needle inside a text, in character offsets of the
/// original text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
}

/// All word-boundary, case-insensitive occurrences of `needle` in `text`.
///
/// An occurrence is a boundary match when the characters immediately before
/// and after it are not alphanumeric. Offsets are character offsets into
/// `text`. Matching is done character by character on lowercased chars, so
/// offsets line up with the original text even when lowercasing changes byte
/// lengths.
pub fn find_mentions(text: &str, needle: &str) -> Vec<Mention> {
    let needle: Vec<char> = fold(needle.trim());
    if needle.is_empty() {
        return Vec::new();
    }
    let hay: Vec<char> = text.chars().collect();
    let folded: Vec<char> = hay.iter().map(|&c| fold_char(c)).collect();
    let mut out = Vec::new();
    if needle.len() > folded.len() {
        return out;
    }
    for start in 0..=folded.len() - needle.len() {
        let end = start + needle.len();
        if folded[start..end] != needle[..] {
            continue;
        }
        let left_ok = start == 0 || !hay[start - 1].is_alphanumeric();
        let right_ok = end == hay.len() || !hay[end].is_alphanumeric();
        if left_ok && right_ok {
            out.push(Mention { start, end });
        }
    }
    out
}

pub fn is_mentioned(text: &str, needle: &str) -> bool {
    !find_mentions(text, needle).is_empty()
}

/// Slice a string by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let s = indices.nth(start)?;
    if start == end {
        return Some(&text[s..s]);
    }
    let e = indices.nth(end - start - 1)?;
    Some(&text[s..e])
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

// Per-char lowercase keeps a 1:1 char mapping; multi-char lowercase
// expansions (rare, e.g. 'İ') collapse to their first char.
fn fold_char(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

fn fold(s: &str) -> Vec<char> {
    s.chars().map(fold_char).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_trims_and_lowercases() {
        assert_eq!(canonical("  Guitar "), "guitar");
        assert_eq!(canonical("ÉCOLE"), "école");
        assert!(same(" guitar ", "GUITAR"));
        assert!(!same("guitars", "guitar"));
    }

    #[test]
    fn word_boundaries() {
        let t = "He plays guitar and piano, not a quarter.";
        assert_eq!(find_mentions(t, "guitar"), vec![Mention { start: 9, end: 15 }]);
        assert!(is_mentioned(t, "Piano"));
        assert!(!is_mentioned(t, "gui"));
        assert!(!is_mentioned(t, "art"));
        assert!(is_mentioned(t, "quarter"));
        assert!(!is_mentioned(t, ""));
    }

    #[test]
    fn multiword_and_unicode_offsets() {
        let t = "Él murió en Nueva York City.";
        let m = find_mentions(t, "nueva york");
        assert_eq!(m.len(), 1);
        assert_eq!(char_slice(t, m[0].start, m[0].end), Some("Nueva York"));
    }

    #[test]
    fn char_slice_bounds() {
        assert_eq!(char_slice("héllo", 1, 3), Some("él"));
        assert_eq!(char_slice("héllo", 0, 5), Some("héllo"));
        assert_eq!(char_slice("héllo", 5, 5), Some(""));
        assert_eq!(char_slice("héllo", 2, 6), None);
        assert_eq!(char_slice("héllo", 3, 2), None);
    }
}
