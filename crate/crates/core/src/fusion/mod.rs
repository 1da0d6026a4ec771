//! Graph construction and the multimodal fusion classifier.

pub mod attention;
pub mod gcn;
pub mod graph;
pub mod model;

pub use attention::AttentionBlock;
pub use gcn::gcn_forward;
pub use graph::{directed_knn, knn_graph, PatchGraph, DEFAULT_K_NN};
pub use model::{
    Architecture, AttentionStat, BagInput, ForwardVars, FusionKind, FusionModel, FusionTrace, GraphInput,
    GraphPlacement, DEFAULT_HEADS,
};
