//! Supervised, distillation, feature-transfer and consistency losses, the
//! PGD attack, and the robustified regularizers built from them.

mod attack;
mod losses;
mod robust;

pub use attack::pgd_attack;
pub use losses::{cross_entropy, entropy, ft_loss, kd_loss, kl_divergence, log_softmax, softmax, LossGrad, PROBABILITY_FLOOR};
pub use robust::{
    adversarial_labeled, ft_on_batch, kd_on_batch, rft_attack, rft_loss, rkd_attack, rkd_loss, rtc_attack, rtc_loss,
};
