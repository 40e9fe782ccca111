use thiserror::Error;

use crate::derivative::DerivativeVariant;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: dims {dims:?} need {expected} elements, data has {found}")]
    ElementCount {
        op: &'static str,
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("column {column} has L1 norm below 1e-12 and cannot be normalized")]
    DegenerateColumn { column: usize },

    #[error("{variant} derivative of order {q} on a {d_in}-dimensional input leaves no output entries")]
    DimensionUnderflow {
        q: usize,
        d_in: usize,
        variant: DerivativeVariant,
    },

    #[error("cosine similarity undefined: {argument} vector has zero norm")]
    ZeroVector { argument: &'static str },

    #[error("label matrix column {column} is not one-hot")]
    NotOneHot { column: usize },

    #[error("similarity stacks must hold {expected} matrices (orders 0..=Q), got {found}")]
    StackLength { expected: usize, found: usize },

    #[error("order budget Q={order_budget} exceeds what a {dim}-channel feature map supports for the {variant} variant")]
    OrderBudget {
        order_budget: usize,
        dim: usize,
        variant: DerivativeVariant,
    },

    #[error("objective is not finite at coordinate {coordinate} (x {sign} eps)")]
    NonFiniteDifference { coordinate: usize, sign: char },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
