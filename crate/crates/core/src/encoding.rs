//! One-hot flow matrices and the row-major reshape that feeds the classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowspace::{validate_flow, Flow, FlowSpaceSpec};

/// `rows x cols` binary matrix; row `j` marks the pass taken at step `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl OneHotMatrix {
    /// Builds a matrix from explicit rows; shape is checked, the one-hot
    /// property is not (see [`decode_one_hot`]).
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut bits = Vec::with_capacity(rows.len() * cols);
        for (j, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {j} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            for &b in row {
                match b {
                    0 => bits.push(false),
                    1 => bits.push(true),
                    other => {
                        return Err(Error::MalformedMatrix(format!(
                            "row {j} holds non-binary value {other}"
                        )))
                    }
                }
            }
        }
        Ok(OneHotMatrix {
            rows: rows.len(),
            cols,
            bits,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    /// Row-major bit array.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits
            .chunks(self.cols.max(1))
            .take(self.rows)
            .map(|r| r.iter().map(|&b| u8::from(b)).collect())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.cols];
        for row in self.bits.chunks(self.cols.max(1)) {
            for (s, &b) in sums.iter_mut().zip(row) {
                *s += usize::from(b);
            }
        }
        sums
    }
}

pub fn encode_one_hot(flow: &Flow, spec: &FlowSpaceSpec) -> Result<OneHotMatrix> {
    validate_flow(spec, flow).into_result(flow, spec)?;
    let cols = spec.pass_count();
    let mut bits = vec![false; flow.len() * cols];
    for (j, &pass) in flow.steps().iter().enumerate() {
        bits[j * cols + usize::from(pass)] = true;
    }
    Ok(OneHotMatrix {
        rows: flow.len(),
        cols,
        bits,
    })
}

pub fn decode_one_hot(matrix: &OneHotMatrix, spec: &FlowSpaceSpec) -> Result<Flow> {
    if matrix.cols != spec.pass_count() {
        return Err(Error::Shape(format!(
            "matrix has {} columns but the space has {} passes",
            matrix.cols,
            spec.pass_count()
        )));
    }
    let mut steps = Vec::with_capacity(matrix.rows);
    for (j, row) in matrix.bits.chunks(matrix.cols.max(1)).enumerate() {
        let mut hot = row.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i);
        match (hot.next(), hot.next()) {
            (Some(i), None) => steps.push(i as u16),
            (None, _) => {
                return Err(Error::MalformedMatrix(format!("row {j} has no set bit")))
            }
            (Some(_), Some(_)) => {
                return Err(Error::MalformedMatrix(format!(
                    "row {j} has more than one set bit"
                )))
            }
        }
    }
    Ok(Flow::new(steps))
}

/// Target layout for the network input, recorded with trained models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub flow_len: usize,
    pub pass_count: usize,
    pub height: usize,
    pub width: usize,
    pub row_major: bool,
}

impl InputLayout {
    /// The unreshaped `L x n` layout.
    pub fn natural(spec: &FlowSpaceSpec) -> Self {
        InputLayout {
            flow_len: spec.flow_len(),
            pass_count: spec.pass_count(),
            height: spec.flow_len(),
            width: spec.pass_count(),
            row_major: true,
        }
    }

    pub fn reshaped(spec: &FlowSpaceSpec, height: usize, width: usize) -> Result<Self> {
        let layout = InputLayout {
            height,
            width,
            ..Self::natural(spec)
        };
        layout.check()?;
        Ok(layout)
    }

    pub fn check(&self) -> Result<()> {
        if self.height * self.width != self.flow_len * self.pass_count {
            return Err(Error::Shape(format!(
                "cannot reshape {}x{} into {}x{}",
                self.flow_len, self.pass_count, self.height, self.width
            )));
        }
        if !self.row_major {
            return Err(Error::Shape("only row-major layouts are supported".into()));
        }
        Ok(())
    }

    /// Encodes and reshapes in one step.
    pub fn encode<T: From<u8>>(&self, flow: &Flow, spec: &FlowSpaceSpec) -> Result<Vec<T>> {
        let matrix = encode_one_hot(flow, spec)?;
        reshape_for_cnn(&matrix, (self.height, self.width))
    }
}

/// Lays the bits out row-major into `height x width`, as 0/1 values.
pub fn reshape_for_cnn<T: From<u8>>(
    matrix: &OneHotMatrix,
    (height, width): (usize, usize),
) -> Result<Vec<T>> {
    if height * width != matrix.rows * matrix.cols {
        return Err(Error::Shape(format!(
            "cannot reshape {}x{} into {height}x{width}",
            matrix.rows, matrix.cols
        )));
    }
    Ok(matrix.bits.iter().map(|&b| T::from(u8::from(b))).collect())
}

/// Inverse of [`reshape_for_cnn`]: values above 0.5 are set bits.
pub fn unreshape(values: &[f64], rows: usize, cols: usize) -> Result<OneHotMatrix> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} values cannot form a {rows}x{cols} matrix",
            values.len()
        )));
    }
    Ok(OneHotMatrix {
        rows,
        cols,
        bits: values.iter().map(|&v| v > 0.5).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowspace::sample_flows;
    use proptest::prelude::*;

    fn grid(values: &[f64], width: usize) -> Vec<Vec<f64>> {
        values.chunks(width).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn worked_example_matrix() {
        let spec = FlowSpaceSpec::numbered(2, 2).unwrap();
        let flow = Flow::from_indices(&[0, 0, 1, 1]);
        let m = encode_one_hot(&flow, &spec).unwrap();
        assert_eq!(m.to_rows(), vec![vec![1, 0], vec![1, 0], vec![0, 1], vec![0, 1]]);
        assert_eq!(decode_one_hot(&m, &spec).unwrap(), flow);
    }

    #[test]
    fn small_encodings() {
        let spec = FlowSpaceSpec::numbered(1, 1).unwrap();
        let m = encode_one_hot(&Flow::from_indices(&[0]), &spec).unwrap();
        assert_eq!(m.to_rows(), vec![vec![1]]);
        assert_eq!(decode_one_hot(&m, &spec).unwrap(), Flow::from_indices(&[0]));

        let spec = FlowSpaceSpec::numbered(3, 1).unwrap();
        let flow = Flow::from_indices(&[2, 0, 1]);
        let m = encode_one_hot(&flow, &spec).unwrap();
        assert_eq!(
            m.to_rows(),
            vec![vec![0, 0, 1], vec![1, 0, 0], vec![0, 1, 0]]
        );
        assert_eq!(decode_one_hot(&m, &spec).unwrap(), flow);
    }

    #[test]
    fn invalid_inputs() {
        let spec = FlowSpaceSpec::numbered(2, 2).unwrap();
        assert!(matches!(
            encode_one_hot(&Flow::from_indices(&[0, 0, 0, 1]), &spec),
            Err(Error::InvalidFlow(_))
        ));
        let two_hot = OneHotMatrix::from_rows(&[[0u8, 1], [1, 1]]).unwrap();
        assert!(matches!(
            decode_one_hot(&two_hot, &FlowSpaceSpec::numbered(2, 1).unwrap()),
            Err(Error::MalformedMatrix(_))
        ));
        let empty_row = OneHotMatrix::from_rows(&[[0u8, 0]]).unwrap();
        assert!(matches!(
            decode_one_hot(&empty_row, &FlowSpaceSpec::numbered(2, 1).unwrap()),
            Err(Error::MalformedMatrix(_))
        ));
        assert!(OneHotMatrix::from_rows(&[vec![0u8, 1], vec![1]]).is_err());
        assert!(OneHotMatrix::from_rows(&[[2u8]]).is_err());
    }

    #[test]
    fn reshape_layouts() {
        let spec = FlowSpaceSpec::numbered(2, 2).unwrap();
        let m = encode_one_hot(&Flow::from_indices(&[0, 1, 1, 0]), &spec).unwrap();
        let same: Vec<f64> = reshape_for_cnn(&m, (4, 2)).unwrap();
        assert_eq!(
            grid(&same, 2),
            vec![vec![1., 0.], vec![0., 1.], vec![0., 1.], vec![1., 0.]]
        );
        let wide: Vec<f64> = reshape_for_cnn(&m, (2, 4)).unwrap();
        // [[r0|r1],[r2|r3]]
        assert_eq!(grid(&wide, 4), vec![vec![1., 0., 0., 1.], vec![0., 1., 1., 0.]]);
        assert!(matches!(
            reshape_for_cnn::<f64>(&m, (3, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reshape_twenty_four_by_six() {
        let spec = FlowSpaceSpec::numbered(6, 4).unwrap();
        let flow = sample_flows(&spec, 1, 3).unwrap().remove(0);
        let m = encode_one_hot(&flow, &spec).unwrap();
        let square: Vec<f64> = reshape_for_cnn(&m, (12, 12)).unwrap();
        let rows = m.to_rows();
        for target_row in 0..12 {
            for c in 0..12 {
                let (src_row, src_col) = (2 * target_row + c / 6, c % 6);
                assert_eq!(square[target_row * 12 + c], f64::from(rows[src_row][src_col]));
            }
        }
        assert_eq!(unreshape(&square, 24, 6).unwrap(), m);
    }

    #[test]
    fn layout_checks() {
        let spec = FlowSpaceSpec::numbered(6, 4).unwrap();
        assert!(InputLayout::reshaped(&spec, 12, 12).is_ok());
        assert!(InputLayout::reshaped(&spec, 12, 11).is_err());
        let natural = InputLayout::natural(&spec);
        assert_eq!((natural.height, natural.width), (24, 6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_column_sums(n in 1usize..6, m in 1usize..4, seed in any::<u64>()) {
            let spec = FlowSpaceSpec::numbered(n, m).unwrap();
            for flow in sample_flows(&spec, 1, seed).unwrap() {
                let matrix = encode_one_hot(&flow, &spec).unwrap();
                prop_assert!(matrix.column_sums().iter().all(|&s| s == m));
                prop_assert_eq!(decode_one_hot(&matrix, &spec).unwrap(), flow);
                let flat: Vec<f64> = reshape_for_cnn(&matrix, (1, n * n * m)).unwrap();
                prop_assert_eq!(unreshape(&flat, n * m, n).unwrap(), matrix);
            }
        }
    }
}
