//! Pre-Align transfer (hypernetwork mapping, then direct injection) and
//! Post-Align transfer (LoRA initialization, then fine-tuning).

mod hyper;
mod inject;
mod lora;

pub use hyper::{
    laten_align_step, laten_gradients, laten_infer_and_inject, laten_locate, laten_train, AlignStep, Hypernetwork,
    LatenOptions, LatenReport, LatenStepRecord, Mlp, Role,
};
pub use inject::{
    inject, inject_unaligned, target_slots, undo_injection, AlignedBlock, AlignedDelta, InjectionRecord, SlotPairing,
};
pub use lora::{attach_lora, lora_finetune, lora_init, LoraFactor, LoraInit, LoraModel};
