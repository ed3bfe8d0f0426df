pub mod callgraph;
pub mod spstore;
pub mod directions;
pub mod agentcore;
pub mod fuzzing;
pub mod pipeline;

/// Compiles and runs the Rust snippets of the guide in `book/`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/call-graph.md")]
    mod call_graph {}
    #[doc = include_str!("../../../book/src/suspicious-points.md")]
    mod suspicious_points {}
    #[doc = include_str!("../../../book/src/directions.md")]
    mod directions {}
    #[doc = include_str!("../../../book/src/agents.md")]
    mod agents {}
    #[doc = include_str!("../../../book/src/fuzzing.md")]
    mod fuzzing {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
