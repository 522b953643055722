//! Tabular patient-record analytics: loading and encoding, correlation,
//! k-means with silhouette scoring, SMOTE and gradient-boosted trees.

mod cluster;
mod gbdt;
mod smote;
mod stats;
mod table;

pub use cluster::{
    cluster_summary, kmeans_fit, select_k, silhouette, write_summary_csv, ClusterModel, ClusterSummaryRow,
    KSelection, Silhouette, MAX_LLOYD_ITERATIONS,
};
pub use gbdt::{gain_importance, gbdt_fit, gbdt_predict_proba, GbdtModel, GbdtParams, Node, Tree};
pub use smote::{balance_classes, smote_oversample, SmoteOutput, DEFAULT_K_NEIGHBORS};
pub use stats::{correlation_matrix, pearson, standardize, write_matrix_csv, Standardized};
pub use table::{export_3d_coordinates, label_encode, Column, EmrTable, LabelMapping, DIAGNOSIS_COLUMN};
