//! Parameter storage, forward sessions and the network blocks.
//!
//! # Parameter names
//!
//! Every learnable tensor and batch-norm buffer has a dotted name:
//!
//! ```text
//! conv:        {layer}.weight  {layer}.bias
//! batch norm:  {bn}.gamma  {bn}.beta  {bn}.running_mean  {bn}.running_var
//! SE:          {se}.reduce.weight  {se}.expand.weight
//! group attention block {b}:
//!   {b}.entry
//!   {b}.pair{j}.attn.{bn1,conv1,bn2,conv2,gate}       (j = 0, 1)
//!   {b}.pair{j}.left.{bn1,conv1,bn2,conv2}            (concat-horizontal only)
//!   {b}.pair{j}.feat.{bn1,conv1,bn2,conv2}
//!   {b}.pair{j}.post
//!   {b}.combine                                       (1x1 combine only)
//!   {b}.se
//! variant block {b}:
//!   {b}.entry
//!   basic:            {b}.conv1 {b}.bn1 {b}.conv2 {b}.bn2
//!   identity_preact:  {b}.bn1 {b}.conv1 {b}.bn2 {b}.conv2
//!   resnext[_se]:     {b}.branch{i}.{conv1,bn1,conv2,bn2,conv3}  [{b}.se]
//!   res_a:            {b}.feat.{bn1,conv1,bn2,conv2} {b}.gate
//! attention module {a}:
//!   {a}.pixel.{conv1,conv2,gate} {a}.feature.{conv1,conv2} {a}.se {a}.sa
//! ```
//! Model-level prefixes are documented in [`crate::model`].

pub mod attention;
pub mod group_attention;
pub mod layers;
pub mod params;
pub mod se;
pub mod session;
pub mod shuffle;
pub mod variants;

pub use attention::AttentionModule;
pub use group_attention::{
    AttentionSubblock, CombineMode, GroupAttentionBlock, GroupAttentionConfig, PairMode,
    ResidualSubblock, GROUPS,
};
pub use layers::{BatchNorm, BnActConv, Conv};
pub use params::{Init, Param, ParamKind, ParamStore, BN_MOMENTUM};
pub use se::SqueezeExcite;
pub use session::{Session, SessionOutput};
pub use shuffle::{channel_shuffle, inverse_permutation, shuffle_permutation};
pub use variants::{VariantBlock, VariantConfig, VariantKind};
