//! Maximal-length pilot sequences and pilot text parsing.

use crate::error::{Error, Result};

/// Feedback taps of `x^8 + x^4 + x^3 + x^2 + 1`.
pub const DEFAULT_TAPS: u32 = 0b1_0001_1101;

/// One period of the m-sequence of a degree-`n` primitive polynomial, where
/// `poly` carries the coefficient of `x^i` in bit `i` (bit `n` and bit 0 set).
/// The register starts at all ones.
///
/// Recurrence: `a[t+n] = XOR of a[t+i]` over the set bits `i < n` of `poly`.
pub fn m_sequence(poly: u32) -> Vec<u8> {
    let degree = 31 - poly.leading_zeros();
    let period = (1usize << degree) - 1;
    let mut reg: Vec<u8> = vec![1; degree as usize];
    let mut out = Vec::with_capacity(period);
    for _ in 0..period {
        out.push(reg[0]);
        let fb = (0..degree)
            .filter(|i| poly >> i & 1 == 1)
            .fold(0u8, |acc, i| acc ^ reg[i as usize]);
        reg.rotate_left(1);
        *reg.last_mut().unwrap() = fb;
    }
    out
}

/// The 255-chip default pilot.
pub fn default_pilot() -> Vec<u8> {
    m_sequence(DEFAULT_TAPS)
}

/// Parses pilot bits from text. A `0x` prefix selects hex (four bits per
/// digit, most significant first); otherwise the text must be a string of
/// `0`/`1`. Whitespace and `_` separators are ignored.
pub fn parse_pilot_bits(text: &str) -> Result<Vec<u8>> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '_')
        .collect();
    if let Some(hex) = cleaned
        .strip_prefix("0x")
        .or_else(|| cleaned.strip_prefix("0X"))
    {
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for ch in hex.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::Parse(format!("bad hex digit {ch:?}")))?;
            bits.extend((0..4).rev().map(|b| ((v >> b) & 1) as u8));
        }
        return Ok(bits);
    }
    cleaned
        .chars()
        .map(|ch| match ch {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::Parse(format!("bad binary digit {ch:?}"))),
        })
        .collect()
}
