//! The coefficient-expression language and the operator file format.

pub mod canon;
pub mod expr;
pub mod file;
pub mod limit;

pub use canon::{Canon, CanonError};
pub use expr::{parse_expr, parse_expr_in, Expr, Func, ParseError, Rational};
pub use limit::{boundary_limit, corner_limit, limit_canon, Approach, LimitError};
