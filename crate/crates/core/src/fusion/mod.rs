//! Attention over the stacked adaptor sets and its training.

mod barlow;
mod model;
mod neighbors;
mod train;

pub use barlow::{barlow_graph, barlow_twins_loss, cross_correlation, BarlowConfig, Projector, ProjectorVars};
pub use model::{
    adaptor_stack, attention_weights, avg_fuse_layer, fuse_graph, fuse_layer, fusion_attention,
    fusion_attention_graph, mean_entropy, FusionLayer, FusionLayerVars, FusionMode, FusionOptions,
    FusionProvenance, GrappaModel, ATTENTION_SUM_TOL, FUSION_KIND,
};
pub use neighbors::{build_knn_graph, sample_neighbor_ids, sample_pairs, NeighborGraph, PairVariant};
pub use train::{
    consistency_objective, supervised_objective, train_fusion, train_fusion_supervised,
    trainable_registry, FusionEpochLog, FusionTrainConfig, FusionTrainables, FusionTraining,
    FusionVariant, SupervisedFusionConfig,
};
