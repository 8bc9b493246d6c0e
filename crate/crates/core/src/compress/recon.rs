use crate::error::{Error, Result};
use crate::eval::tokenizer::encode_str;

pub const RECON_INSTRUCTION: &str = "\nRepeat the text above exactly.\n";

/// `<text><instruction><text>`, with the loss applied from `loss_start` on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconSequence {
    pub tokens: Vec<usize>,
    pub loss_start: usize,
    /// Length of the (possibly truncated) text span.
    pub text_len: usize,
}

impl ReconSequence {
    pub fn loss_span(&self) -> std::ops::Range<usize> {
        self.loss_start..self.tokens.len()
    }
}

/// Builds a reconstruction sequence of at most `max_len` tokens. Text that
/// does not fit is cut in the middle, keeping a head and a tail of equal
/// length.
pub fn build_reconstruction_sequence(text: &[usize], max_len: usize) -> Result<ReconSequence> {
    if text.is_empty() {
        return Err(Error::Precondition("reconstruction text is empty".into()));
    }
    let instr = encode_str(RECON_INSTRUCTION);
    let room = max_len.saturating_sub(instr.len()) / 2;
    let body: Vec<usize> = if text.len() <= room {
        text.to_vec()
    } else {
        let half = room / 2;
        if half == 0 {
            return Err(Error::Precondition(format!("{max_len} tokens leave no room for the text")));
        }
        text[..half].iter().chain(&text[text.len() - half..]).copied().collect()
    };
    let mut tokens = body.clone();
    tokens.extend_from_slice(&instr);
    let loss_start = tokens.len();
    tokens.extend_from_slice(&body);
    Ok(ReconSequence { tokens, loss_start, text_len: body.len() })
}
