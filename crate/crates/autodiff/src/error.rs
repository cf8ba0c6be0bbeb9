use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("slice {start}..{end} on axis {axis} out of range for shape {shape:?}")]
    BadSlice {
        shape: Vec<usize>,
        axis: usize,
        start: usize,
        end: usize,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value at coordinate {index} during gradient check")]
    NonFinite { index: usize },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"ICEW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor name longer than 65535 bytes")]
    NameTooLong,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
