use super::CleanMessage;

/// Rule-based sentence splitter for cleaned messages.
///
/// A boundary is a `.` followed by whitespace and then an uppercase ASCII
/// letter. Periods followed by a digit (`VIS 4. 7R`) or by a non-space
/// character (`112.5`, `.ANCATXA`) never end a sentence. Segments keep their
/// terminal period; whitespace at the boundary is dropped.
pub fn segment_sentences(clean: &CleanMessage) -> Vec<String> {
    split_text(&clean.body)
}

pub(crate) fn split_text(body: &str) -> Vec<String> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'.' && !between_digits(bytes, i) {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j].is_ascii_uppercase() {
                push_segment(&mut out, &body[start..=i]);
                start = j;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    push_segment(&mut out, &body[start..]);
    out
}

fn between_digits(bytes: &[u8], i: usize) -> bool {
    i > 0 && i + 1 < bytes.len() && bytes[i - 1].is_ascii_digit() && bytes[i + 1].is_ascii_digit()
}

fn push_segment(out: &mut Vec<String>, seg: &str) {
    let seg = seg.trim();
    if !seg.is_empty() {
        out.push(seg.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sentence() {
        assert_eq!(split_text("HAZD WX FOR SLC AREA."), vec!["HAZD WX FOR SLC AREA."]);
    }

    #[test]
    fn two_closures() {
        assert_eq!(split_text("RWY 6/24 CLOSED. TWY SJ CLOSED."), vec!["RWY 6/24 CLOSED.", "TWY SJ CLOSED."]);
    }

    #[test]
    fn decimal_frequency_not_split() {
        let segs = split_text(
            "TRANSITION LEVEL FL40. NOTAM, ABA VOR/DME FREQ 112.5 MHZ OUT OF SER UFN. ADZ ON INITIAL CTC YOU HAVE INFO T.",
        );
        assert_eq!(segs[1], "NOTAM, ABA VOR/DME FREQ 112.5 MHZ OUT OF SER UFN.");
        assert_eq!(segs.len(), 3);
    }

    #[test]
    fn period_before_digit_not_split() {
        assert_eq!(split_text("RMK SFC VIS 4. 7R IN USE.").len(), 1);
    }

    #[test]
    fn empty_body() {
        assert!(split_text("").is_empty());
    }
}
