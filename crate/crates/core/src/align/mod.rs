//! Projectors into token space, instruction templates and the two alignment
//! training stages.

mod model;
mod projector;
mod template;
mod train;

pub use model::AlignedModel;
pub use projector::{project_items, project_users, Projector, ProjectorKind, ProjectorVars};
pub use template::{
    build_item_text_template, build_user_item_template, item_text_len, plan_item_batches,
    shuffled_order, UserPrompt, UserSource, ITEM_TEXT_HEADER, USER_ITEM_HEADER,
};
pub use train::{
    recent, Ablation, AlignParams, ItemTextTask, LabelPolicy, Stage2Config, Stage3Config,
    UserEncoder, UserItemTask, UserPromptBuilder, UserText,
};
