//! Character-level vocabulary.
//!
//! Ids are fixed and stable across runs: specials first, then the alphabet,
//! then space. The CTC blank lives one past the decoder vocabulary; it never
//! appears in decoder targets.

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOU: usize = 2;
pub const UNK: usize = 3;
pub const LETTER_BASE: usize = 4; // 'a' = 4 .. 'z' = 29
pub const SPACE: usize = 30;

/// Decoder vocabulary size (specials + a-z + space).
pub const VOCAB_SIZE: usize = 31;
/// CTC blank class, used only by the CTC head.
pub const CTC_BLANK: usize = 31;
/// CTC head output width: decoder vocab + blank.
pub const CTC_DIM: usize = 32;

pub fn char_to_id(c: char) -> usize {
    match c {
        'a'..='z' => LETTER_BASE + (c as usize - 'a' as usize),
        ' ' => SPACE,
        _ => UNK,
    }
}

pub fn id_to_char(id: usize) -> Option<char> {
    match id {
        LETTER_BASE..=29 => Some((b'a' + (id - LETTER_BASE) as u8) as char),
        SPACE => Some(' '),
        _ => None,
    }
}

/// Text to token ids. Unknown characters map to `<unk>`.
pub fn encode(text: &str) -> Vec<usize> {
    text.chars().map(char_to_id).collect()
}

/// Token ids back to text. Structural tokens vanish; `<unk>` renders as '?'
/// (not in the alphabet, so it can never spuriously match a reference).
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .filter_map(|&id| match id {
            UNK => Some('?'),
            _ => id_to_char(id),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_plain_text() {
        let text = "the quick brown fox";
        assert_eq!(decode(&encode(text)), text);
    }

    #[test]
    fn ids_are_stable() {
        assert_eq!(char_to_id('a'), 4);
        assert_eq!(char_to_id('z'), 29);
        assert_eq!(char_to_id(' '), SPACE);
        assert_eq!(char_to_id('!'), UNK);
        assert_eq!(VOCAB_SIZE, 31);
        assert_eq!(CTC_BLANK, 31);
    }

    #[test]
    fn specials_do_not_render() {
        assert_eq!(decode(&[SOS, 4, EOU, PAD]), "a");
    }
}
