//! Library side of the `irrigo` binary: the offline model pipeline and the
//! in-process full-stack runner, shared with the acceptance tests.

pub mod gate;
pub mod pipeline;
pub mod stack;
