//! Binary LDPC codes: quasi-cyclic construction, alist I/O, systematic
//! encoding and normalized min-sum decoding.
//!
//! Log-ratios at this module's boundary are `log P(bit = 1) / P(bit = 0)`,
//! the same orientation as the detector's soft output.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::channel::seeded_rng;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_SUM_SCALE: f64 = 0.75;
pub const DEFAULT_CODE_SEED: u64 = 20_050_401;

/// Magnitude cap for log-ratios inside the decoder.
const LLR_CLAMP: f64 = 50.0;

/// Shape of a quasi-cyclic code built by [`LdpcCode::quasi_cyclic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QcShape {
    /// Block rows of the base matrix.
    pub block_rows: usize,
    /// Block columns of the base matrix; the last `block_rows` carry parity.
    pub block_cols: usize,
    /// Circulant size.
    pub circulant: usize,
}

impl QcShape {
    /// The default (1024, 512) code.
    pub const DESK: QcShape = QcShape {
        block_rows: 8,
        block_cols: 16,
        circulant: 64,
    };
    /// The (12620, 6310) code.
    pub const PAPER: QcShape = QcShape {
        block_rows: 10,
        block_cols: 20,
        circulant: 631,
    };
}

/// Parity-check matrix with a systematic encoder.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    n: usize,
    /// Variable indices of each check.
    checks: Vec<Vec<usize>>,
    /// Codeword positions carrying the information bits, in order.
    info_positions: Vec<usize>,
    /// For each parity position, the information indices it sums.
    parity: Vec<(usize, Vec<usize>)>,
}

/// Output of [`LdpcCode::decode`].
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub bits: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
    /// Posterior log-ratios `log P(1)/P(0)`.
    pub posterior_llr: Vec<f64>,
    pub unsatisfied: usize,
}

/// Dense GF(2) row over `n` columns.
#[derive(Clone)]
struct BitRow(Vec<u64>);

impl BitRow {
    fn zeros(n: usize) -> Self {
        BitRow(vec![0; n.div_ceil(64)])
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
    fn flip(&mut self, i: usize) {
        self.0[i / 64] ^= 1 << (i % 64);
    }
    fn xor(&mut self, other: &BitRow) {
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a ^= b);
    }
}

impl LdpcCode {
    /// Builds a code from the variable indices of each check. Encoding uses
    /// Gaussian elimination with pivots taken from the rightmost columns, so
    /// for a full-rank parity part on the right the information bits are the
    /// codeword prefix.
    pub fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        for (r, row) in checks.iter().enumerate() {
            if let Some(&v) = row.iter().find(|&&v| v >= n) {
                return Err(Error::config(format!("checks[{r}]"), format!("variable {v} >= n = {n}")));
            }
        }
        let mut rows: Vec<BitRow> = checks
            .iter()
            .map(|row| {
                let mut b = BitRow::zeros(n);
                row.iter().for_each(|&v| b.flip(v));
                b
            })
            .collect();
        let mut pivots: Vec<usize> = Vec::new();
        let mut rank = 0;
        for col in (0..n).rev() {
            if rank == rows.len() {
                break;
            }
            let Some(p) = (rank..rows.len()).find(|&r| rows[r].get(col)) else {
                continue;
            };
            rows.swap(rank, p);
            let pivot = rows[rank].clone();
            for (r, row) in rows.iter_mut().enumerate() {
                if r != rank && row.get(col) {
                    row.xor(&pivot);
                }
            }
            pivots.push(col);
            rank += 1;
        }
        let mut is_pivot = vec![false; n];
        pivots.iter().for_each(|&c| is_pivot[c] = true);
        let info_positions: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
        let parity = pivots
            .iter()
            .zip(&rows)
            .map(|(&col, row)| {
                let deps = info_positions
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| row.get(c))
                    .map(|(j, _)| j)
                    .collect();
                (col, deps)
            })
            .collect();
        Ok(LdpcCode {
            n,
            checks,
            info_positions,
            parity,
        })
    }

    /// Quasi-cyclic code: information block columns of weight 3 with random
    /// circulant shifts (redrawn until the base matrix has no 4-cycles) and a
    /// block dual-diagonal identity staircase as the parity part.
    pub fn quasi_cyclic(shape: QcShape, seed: u64) -> Result<Self> {
        let QcShape {
            block_rows: mb,
            block_cols: nb,
            circulant: z,
        } = shape;
        if mb < 3 || nb <= mb || z == 0 {
            return Err(Error::config(
                "qc shape",
                "need at least 3 block rows, more block columns than rows and a positive circulant",
            ));
        }
        let kb = nb - mb;
        let mut rng = seeded_rng(seed, 0);
        // shifts[r][c] = Some(shift) for a nonzero circulant
        let mut shifts: Vec<Vec<Option<usize>>> = vec![vec![None; nb]; mb];
        for j in 0..mb {
            shifts[j][kb + j] = Some(0);
            if j + 1 < mb {
                shifts[j + 1][kb + j] = Some(0);
            }
        }
        for c in 0..kb {
            let rows = [(3 * c) % mb, (3 * c + 1) % mb, (3 * c + 2) % mb];
            for &r in &rows {
                let mut tries = 0;
                loop {
                    shifts[r][c] = Some(rng.random_range(0..z));
                    if !has_four_cycle(&shifts, z, c) || tries > 1000 {
                        break;
                    }
                    tries += 1;
                }
            }
        }
        let mut checks = vec![Vec::new(); mb * z];
        for (r, row) in shifts.iter().enumerate() {
            for (c, s) in row.iter().enumerate() {
                if let Some(s) = s {
                    for i in 0..z {
                        checks[r * z + i].push(c * z + (i + s) % z);
                    }
                }
            }
        }
        checks.iter_mut().for_each(|row| row.sort_unstable());
        Self::from_checks(nb * z, checks)
    }

    /// The default (1024, 512) code.
    pub fn desk_default() -> Self {
        Self::quasi_cyclic(QcShape::DESK, DEFAULT_CODE_SEED).expect("valid built-in shape")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Dimension `n − rank(H)`.
    pub fn k(&self) -> usize {
        self.info_positions.len()
    }

    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    pub fn info_positions(&self) -> &[usize] {
        &self.info_positions
    }

    /// Information bits read back from a codeword.
    pub fn extract_info(&self, codeword: &[u8]) -> Vec<u8> {
        self.info_positions.iter().map(|&p| codeword[p]).collect()
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != self.k() {
            return Err(Error::LengthMismatch {
                what: "information bits",
                expected: self.k(),
                actual: info.len(),
            });
        }
        let mut cw = vec![0u8; self.n];
        for (&p, &b) in self.info_positions.iter().zip(info) {
            cw[p] = b & 1;
        }
        for (col, deps) in &self.parity {
            cw[*col] = deps.iter().fold(0, |acc, &j| acc ^ (info[j] & 1));
        }
        Ok(cw)
    }

    /// Number of unsatisfied checks.
    pub fn syndrome_weight(&self, bits: &[u8]) -> usize {
        self.checks
            .iter()
            .filter(|row| row.iter().fold(0, |acc, &v| acc ^ bits[v]) & 1 == 1)
            .count()
    }

    /// Flooding normalized min-sum; stops as soon as every check is satisfied.
    pub fn decode(&self, channel_llr: &[f64], max_iters: usize, scale: f64) -> Result<DecodeResult> {
        if channel_llr.len() != self.n {
            return Err(Error::LengthMismatch {
                what: "channel LLRs",
                expected: self.n,
                actual: channel_llr.len(),
            });
        }
        if channel_llr.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("channel LLRs"));
        }
        // Internally log P(0)/P(1), so a negative value decides 1.
        let prior: Vec<f64> = channel_llr
            .iter()
            .map(|&x| (-x).clamp(-LLR_CLAMP, LLR_CLAMP))
            .collect();
        let edges: usize = self.checks.iter().map(Vec::len).sum();
        let mut c2v = vec![0.0; edges];
        let mut v2c = vec![0.0; edges];
        let mut total = prior.clone();
        let mut bits: Vec<u8> = total.iter().map(|&x| u8::from(x < 0.0)).collect();
        let mut unsatisfied = self.syndrome_weight(&bits);
        let mut iterations = 0;
        while iterations < max_iters {
            iterations += 1;
            let mut e = 0;
            for row in &self.checks {
                let start = e;
                for &v in row {
                    v2c[e] = total[v] - c2v[e];
                    e += 1;
                }
                let msgs = &v2c[start..e];
                let (mut min1, mut min2, mut at) = (f64::INFINITY, f64::INFINITY, usize::MAX);
                let mut negative = false;
                for (i, &m) in msgs.iter().enumerate() {
                    let a = m.abs();
                    negative ^= m < 0.0;
                    if a < min1 {
                        min2 = min1;
                        min1 = a;
                        at = i;
                    } else if a < min2 {
                        min2 = a;
                    }
                }
                for i in 0..row.len() {
                    let mag = if i == at { min2 } else { min1 };
                    let sign = if negative ^ (msgs[i] < 0.0) { -1.0 } else { 1.0 };
                    c2v[start + i] = if mag.is_finite() { sign * scale * mag } else { 0.0 };
                }
            }
            total.copy_from_slice(&prior);
            let mut e = 0;
            for row in &self.checks {
                for &v in row {
                    total[v] += c2v[e];
                    e += 1;
                }
            }
            bits.iter_mut()
                .zip(&total)
                .for_each(|(b, &x)| *b = u8::from(x < 0.0));
            unsatisfied = self.syndrome_weight(&bits);
            if unsatisfied == 0 {
                break;
            }
        }
        Ok(DecodeResult {
            bits,
            converged: unsatisfied == 0,
            iterations,
            posterior_llr: total.iter().map(|&x| (-x).clamp(-LLR_CLAMP, LLR_CLAMP)).collect(),
            unsatisfied,
        })
    }

    /// Reads the alist format: `n m`, maximum weights, column and row
    /// weights, then 1-based indices per column and per row (zero padding
    /// allowed). The row lists define the code; the column lists must agree.
    pub fn read_alist<R: BufRead>(reader: R) -> Result<Self> {
        let mut nums = Vec::new();
        for line in reader.lines() {
            for tok in line?.split_whitespace() {
                nums.push(
                    tok.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad alist token {tok:?}")))?,
                );
            }
        }
        let mut it = nums.into_iter();
        let mut next = |what: &str| it.next().ok_or_else(|| Error::Parse(format!("alist truncated at {what}")));
        let n = next("n")?;
        let m = next("m")?;
        let max_col = next("max column weight")?;
        let max_row = next("max row weight")?;
        let col_w: Vec<usize> = (0..n).map(|_| next("column weights")).collect::<Result<_>>()?;
        let row_w: Vec<usize> = (0..m).map(|_| next("row weights")).collect::<Result<_>>()?;
        let mut cols: Vec<Vec<usize>> = Vec::with_capacity(n);
        for &w in &col_w {
            let entries: Vec<usize> = (0..max_col).map(|_| next("column lists")).collect::<Result<_>>()?;
            cols.push(entries.iter().filter(|&&x| x > 0).map(|&x| x - 1).collect());
            if cols.last().unwrap().len() != w {
                return Err(Error::Parse("alist column weight mismatch".into()));
            }
        }
        let mut checks: Vec<Vec<usize>> = Vec::with_capacity(m);
        for &w in &row_w {
            let entries: Vec<usize> = (0..max_row).map(|_| next("row lists")).collect::<Result<_>>()?;
            checks.push(entries.iter().filter(|&&x| x > 0).map(|&x| x - 1).collect());
            if checks.last().unwrap().len() != w {
                return Err(Error::Parse("alist row weight mismatch".into()));
            }
        }
        for (v, col) in cols.iter().enumerate() {
            for &r in col {
                if r >= m || !checks[r].contains(&v) {
                    return Err(Error::Parse(format!("alist column {v} disagrees with rows")));
                }
            }
        }
        Self::from_checks(n, checks)
    }

    pub fn load_alist(path: &Path) -> Result<Self> {
        Self::read_alist(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_alist<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.checks.len();
        let mut cols = vec![Vec::new(); self.n];
        for (r, row) in self.checks.iter().enumerate() {
            row.iter().for_each(|&v| cols[v].push(r));
        }
        let max_col = cols.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = self.checks.iter().map(Vec::len).max().unwrap_or(0);
        let line = |xs: &mut dyn Iterator<Item = usize>| {
            xs.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
        };
        writeln!(w, "{} {}", self.n, m)?;
        writeln!(w, "{max_col} {max_row}")?;
        writeln!(w, "{}", line(&mut cols.iter().map(Vec::len)))?;
        writeln!(w, "{}", line(&mut self.checks.iter().map(Vec::len)))?;
        for col in &cols {
            let mut xs = col.iter().map(|r| r + 1).chain(std::iter::repeat(0)).take(max_col);
            writeln!(w, "{}", line(&mut xs))?;
        }
        for row in &self.checks {
            let mut xs = row.iter().map(|v| v + 1).chain(std::iter::repeat(0)).take(max_row);
            writeln!(w, "{}", line(&mut xs))?;
        }
        Ok(())
    }
}

/// True if block column `col` closes a 4-cycle with any other block column.
fn has_four_cycle(shifts: &[Vec<Option<usize>>], z: usize, col: usize) -> bool {
    let mb = shifts.len();
    let nb = shifts[0].len();
    for a in 0..mb {
        for b in a + 1..mb {
            let (Some(sa), Some(sb)) = (shifts[a][col], shifts[b][col]) else {
                continue;
            };
            for d in (0..nb).filter(|&d| d != col) {
                let (Some(ta), Some(tb)) = (shifts[a][d], shifts[b][d]) else {
                    continue;
                };
                if (sa + tb + 2 * z - sb - ta).is_multiple_of(z) {
                    return true;
                }
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_bits(len: usize, seed: u64) -> Vec<u8> {
        let mut rng = seeded_rng(seed, 7);
        (0..len).map(|_| rng.random_range(0..2u8)).collect()
    }

    #[test]
    fn desk_code_shape() {
        let code = LdpcCode::desk_default();
        assert_eq!((code.n(), code.k()), (1024, 512));
        assert_eq!(code.info_positions(), (0..512).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn encoding_is_linear_and_valid() {
        let code = LdpcCode::desk_default();
        assert!(code.encode(&vec![0; 512]).unwrap().iter().all(|&b| b == 0));
        let a = random_bits(512, 1);
        let b = random_bits(512, 2);
        let ca = code.encode(&a).unwrap();
        let cb = code.encode(&b).unwrap();
        assert_eq!(code.syndrome_weight(&ca), 0);
        assert_eq!(code.extract_info(&ca), a);
        let ab: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x ^ y).collect();
        let cab: Vec<u8> = ca.iter().zip(&cb).map(|(x, y)| x ^ y).collect();
        assert_eq!(code.encode(&ab).unwrap(), cab);
    }

    #[test]
    fn no_four_cycles() {
        let code = LdpcCode::desk_default();
        let mut seen = std::collections::HashSet::new();
        for row in code.checks() {
            for (i, &u) in row.iter().enumerate() {
                for &v in &row[i + 1..] {
                    assert!(seen.insert((u, v)), "pair ({u}, {v}) shared by two checks");
                }
            }
        }
    }

    #[test]
    fn clean_llrs_decode_in_one_iteration() {
        let code = LdpcCode::desk_default();
        let cw = code.encode(&random_bits(512, 3)).unwrap();
        let llr: Vec<f64> = cw.iter().map(|&b| if b == 1 { 20.0 } else { -20.0 }).collect();
        let out = code.decode(&llr, 25, DEFAULT_MIN_SUM_SCALE).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.bits, cw);
    }

    #[test]
    fn corrects_a_flipped_bit() {
        let code = LdpcCode::desk_default();
        let cw = code.encode(&random_bits(512, 4)).unwrap();
        let mut llr: Vec<f64> = cw.iter().map(|&b| if b == 1 { 4.0 } else { -4.0 }).collect();
        llr[17] = -llr[17] * 2.0;
        let out = code.decode(&llr, 25, DEFAULT_MIN_SUM_SCALE).unwrap();
        assert!(out.converged);
        assert_eq!(out.bits, cw);
    }

    #[test]
    fn alist_roundtrip() {
        let code = LdpcCode::quasi_cyclic(
            QcShape {
                block_rows: 3,
                block_cols: 6,
                circulant: 7,
            },
            9,
        )
        .unwrap();
        let mut buf = Vec::new();
        code.write_alist(&mut buf).unwrap();
        let back = LdpcCode::read_alist(buf.as_slice()).unwrap();
        assert_eq!(back.checks(), code.checks());
        assert_eq!(back.k(), code.k());
        assert!(LdpcCode::read_alist("4 2\n1".as_bytes()).is_err());
    }

    #[test]
    fn rank_deficient_code_has_larger_dimension() {
        // two identical checks
        let code = LdpcCode::from_checks(4, vec![vec![0, 1, 3], vec![0, 1, 3]]).unwrap();
        assert_eq!(code.k(), 3);
        let cw = code.encode(&[1, 0, 1]).unwrap();
        assert_eq!(code.syndrome_weight(&cw), 0);
    }
}
