//! Feature files and CSV output.
//!
//! Binary layout (little-endian), 40-byte header followed by a row-major payload:
//!
//! | offset | size | field            |
//! |--------|------|------------------|
//! | 0      | 4    | magic `"MFTB"`   |
//! | 4      | 4    | version (`1`)    |
//! | 8      | 8    | `n_rows`         |
//! | 16     | 8    | `dim`            |
//! | 24     | 1    | dtype code       |
//! | 25     | 1    | normalized flag  |
//! | 26     | 14   | reserved, zero   |

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::drift::DriftReport;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::matrix::FeatureMatrix;
use crate::trainer::LambdaRow;

pub const MAGIC: [u8; 4] = *b"MFTB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
pub const RESERVED_LEN: usize = 14;
/// Row-norm tolerance applied to files carrying the normalized flag.
pub const LOAD_UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 1,
            Dtype::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::F32),
            other => Err(Error::BadDtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub n_rows: u64,
    pub dim: u64,
    pub dtype: Dtype,
    pub normalized: bool,
}

impl FeatureFileHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&VERSION.to_le_bytes());
        out[8..16].copy_from_slice(&self.n_rows.to_le_bytes());
        out[16..24].copy_from_slice(&self.dim.to_le_bytes());
        out[24] = self.dtype.code();
        out[25] = u8::from(self.normalized);
        out
    }

    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Result<Self> {
        let magic: [u8; 4] = bytes[0..4].try_into().expect("fixed slice");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("fixed slice"));
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let n_rows = u64::from_le_bytes(bytes[8..16].try_into().expect("fixed slice"));
        let dim = u64::from_le_bytes(bytes[16..24].try_into().expect("fixed slice"));
        let dtype = Dtype::from_code(bytes[24])?;
        let normalized = match bytes[25] {
            0 => false,
            1 => true,
            other => return Err(Error::Parse(format!("normalized flag {other} is not 0 or 1"))),
        };
        if bytes[HEADER_LEN - RESERVED_LEN..].iter().any(|&b| b != 0) {
            return Err(Error::BadReserved);
        }
        Ok(Self {
            n_rows,
            dim,
            dtype,
            normalized,
        })
    }

    /// Payload size in bytes, or `None` on overflow.
    pub fn payload_len(&self) -> Option<u64> {
        self.n_rows
            .checked_mul(self.dim)?
            .checked_mul(self.dtype.width() as u64)
    }
}

pub fn write_feature_matrix<W: Write>(matrix: &FeatureMatrix, dtype: Dtype, mut out: W) -> Result<()> {
    let header = FeatureFileHeader {
        n_rows: matrix.n_rows() as u64,
        dim: matrix.dim() as u64,
        dtype,
        normalized: matrix.is_normalized(),
    };
    out.write_all(&header.to_bytes())?;
    match dtype {
        Dtype::F64 => {
            for x in matrix.as_slice() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for x in matrix.as_slice() {
                out.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads until `buf` is full or the stream ends; returns bytes read.
fn fill(input: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn read_feature_matrix<R: Read>(mut input: R) -> Result<FeatureMatrix> {
    let mut head = [0u8; HEADER_LEN];
    let got = fill(&mut input, &mut head)?;
    if got < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN as u64,
            found: got as u64,
        });
    }
    let header = FeatureFileHeader::parse(&head)?;
    let expected = header
        .payload_len()
        .filter(|&n| n <= usize::MAX as u64)
        .ok_or_else(|| Error::Parse("header dimensions overflow".into()))?;
    let mut payload = Vec::new();
    (&mut input).take(expected).read_to_end(&mut payload)?;
    if (payload.len() as u64) < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len() as u64,
        });
    }
    let mut probe = [0u8; 1];
    if fill(&mut input, &mut probe)? != 0 {
        return Err(Error::Parse(format!("trailing bytes after {expected}-byte payload")));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect(),
    };
    let matrix = FeatureMatrix::new(data, header.n_rows as usize, header.dim as usize)?;
    if header.normalized {
        matrix.into_normalized_within(LOAD_UNIT_TOLERANCE)
    } else {
        Ok(matrix)
    }
}

pub fn save_feature_matrix(matrix: &FeatureMatrix, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    write_feature_matrix(matrix, dtype, BufWriter::new(File::create(path)?))
}

pub fn load_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    read_feature_matrix(BufReader::new(File::open(path)?))
}

/// Parses the text fixture format: a `dim=<d>` line, then one comma-separated
/// row per line. Blank lines are skipped.
pub fn parse_csv_matrix(text: &str) -> Result<FeatureMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse("missing dim=<d> header".into()))?;
    let dim: usize = first
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| Error::Parse(format!("expected dim=<d> header, found {:?}", first.trim())))?;
    let mut data = Vec::new();
    let mut n_rows = 0usize;
    for (lineno, line) in lines {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad number {:?}", lineno + 1, field.trim())))?;
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(Error::Parse(format!(
                "line {}: {} fields, expected {dim}",
                lineno + 1,
                data.len() - before
            )));
        }
        n_rows += 1;
    }
    FeatureMatrix::new(data, n_rows, dim)
}

pub fn load_csv_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    parse_csv_matrix(&std::fs::read_to_string(path)?)
}

/// One non-negative integer label per line; blank lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad label {:?}", i + 1, l.trim())))
        })
        .collect()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_labels(&std::fs::read_to_string(path)?)
}

pub const DRIFT_CSV_HEADER: &str = "rank,ratio_pretrained,ratio_tuned,delta,n_samples";
pub const HISTORY_CSV_HEADER: &str = "epoch,ce,img,txt,con,total";
pub const SUMMARY_CSV_HEADER: &str = "lambda,delta,mean_alignment,test_accuracy";

pub fn drift_csv(reports: &[DriftReport]) -> String {
    let mut s = format!("{DRIFT_CSV_HEADER}\n");
    for r in reports {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{}",
            r.rank, r.ratio_pretrained, r.ratio_tuned, r.delta, r.n_samples
        )
        .expect("writing to a String");
    }
    s
}

pub fn history_csv(history: &[LossBreakdown]) -> String {
    let mut s = format!("{HISTORY_CSV_HEADER}\n");
    for (epoch, l) in history.iter().enumerate() {
        writeln!(
            s,
            "{epoch},{:.6},{:.6},{:.6},{:.6},{:.6}",
            l.ce, l.img, l.txt, l.con, l.total
        )
        .expect("writing to a String");
    }
    s
}

pub fn summary_csv(rows: &[LambdaRow]) -> String {
    let mut s = format!("{SUMMARY_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{:.6},{:.6},{:.6},{:.6}",
            r.lambda, r.delta, r.mean_alignment, r.test_accuracy
        )
        .expect("writing to a String");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureMatrix {
        FeatureMatrix::new(vec![1.0, -2.5, 3.25, 0.1, 1e-300, -0.0], 2, 3).unwrap()
    }

    fn bytes_of(m: &FeatureMatrix, dtype: Dtype) -> Vec<u8> {
        let mut buf = Vec::new();
        write_feature_matrix(m, dtype, &mut buf).unwrap();
        buf
    }

    #[test]
    fn header_layout() {
        let m = FeatureMatrix::new_normalized(vec![0.6, 0.8], 1, 2).unwrap();
        let buf = bytes_of(&m, Dtype::F64);
        assert_eq!(buf.len(), HEADER_LEN + 16);
        assert_eq!(&buf[0..4], b"MFTB");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(buf[24], 1);
        assert_eq!(buf[25], 1);
        assert!(buf[26..40].iter().all(|&b| b == 0));
        assert_eq!(&buf[40..48], &0.6f64.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = sample();
        let back = read_feature_matrix(&bytes_of(&m, Dtype::F64)[..]).unwrap();
        assert_eq!(m.n_rows(), back.n_rows());
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_round_trip_is_close() {
        let m = FeatureMatrix::new(vec![0.1, 0.2, 0.3, -0.7], 2, 2).unwrap();
        let back = read_feature_matrix(&bytes_of(&m, Dtype::F32)[..]).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_rows_are_valid() {
        let m = FeatureMatrix::new(vec![], 0, 5).unwrap();
        let buf = bytes_of(&m, Dtype::F64);
        assert_eq!(buf.len(), HEADER_LEN);
        let back = read_feature_matrix(&buf[..]).unwrap();
        assert_eq!((back.n_rows(), back.dim()), (0, 5));
    }

    #[test]
    fn header_errors() {
        let good = bytes_of(&sample(), Dtype::F64);
        let mut bad = good.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_feature_matrix(&bad[..]), Err(Error::BadMagic(m)) if &m == b"XXXX"));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(read_feature_matrix(&bad[..]), Err(Error::BadVersion(2))));
        let mut bad = good.clone();
        bad[24] = 3;
        assert!(matches!(read_feature_matrix(&bad[..]), Err(Error::BadDtype(3))));
        let mut bad = good.clone();
        bad[39] = 1;
        assert!(matches!(read_feature_matrix(&bad[..]), Err(Error::BadReserved)));
        assert!(matches!(
            read_feature_matrix(&good[..10]),
            Err(Error::TruncatedPayload { expected: 40, found: 10 })
        ));
    }

    #[test]
    fn short_payload_is_truncated() {
        let m = FeatureMatrix::new(vec![0.5; 30], 10, 3).unwrap();
        let buf = bytes_of(&m, Dtype::F64);
        let cut = &buf[..buf.len() - 24];
        assert!(matches!(
            read_feature_matrix(cut),
            Err(Error::TruncatedPayload { expected: 240, found: 216 })
        ));
    }

    #[test]
    fn flagged_rows_are_checked() {
        let m = FeatureMatrix::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap().into_normalized().unwrap();
        let mut buf = bytes_of(&m, Dtype::F64);
        buf[HEADER_LEN + 16..HEADER_LEN + 24].copy_from_slice(&1.1f64.to_le_bytes());
        assert!(matches!(
            read_feature_matrix(&buf[..]),
            Err(Error::NotNormalized { row: 1, .. })
        ));
    }

    #[test]
    fn csv_fixture() {
        let m = parse_csv_matrix("dim=2\n1, 0\n\n0.6,0.8\n").unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0, 0.6, 0.8]);
        assert!(parse_csv_matrix("1,0\n").is_err());
        assert!(parse_csv_matrix("dim=2\n1,0,3\n").is_err());
        assert_eq!(parse_labels("0\n2\n\n1\n").unwrap(), vec![0, 2, 1]);
        assert!(parse_labels("0\n-1\n").is_err());
    }

    #[test]
    fn csv_writers_use_six_decimals() {
        let rows = [LambdaRow {
            lambda: 12.0,
            delta: -0.0019,
            mean_alignment: 0.5,
            test_accuracy: 1.0,
        }];
        assert_eq!(summary_csv(&rows), "lambda,delta,mean_alignment,test_accuracy\n12.000000,-0.001900,0.500000,1.000000\n");
    }
}
