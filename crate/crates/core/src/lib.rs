//! Sub-Riemannian geometry primitives and discrete optimal transport with the
//! squared sub-Riemannian distance as cost.

pub mod displacement;
pub mod frames;
pub mod geodesics;
pub mod kantorovich;
pub mod lab;
pub mod metric;
pub mod regularity;
pub mod singular;
pub(crate) mod linalg;
