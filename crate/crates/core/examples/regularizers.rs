//! The clean loss terms on hand-built logits and features.

use cil_qud::regularizers::{cross_entropy, ft_loss, kd_loss, kl_divergence};
use ndarray::array;

fn main() -> cil_qud::Result<()> {
    let logits = array![[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]];
    let ce = cross_entropy(&logits.view(), &[0, 2])?;
    println!("cross entropy {:.4}, grad row 0 {:?}", ce.value, ce.grad.row(0).to_vec());

    // Snapshot saw two classes; the live head has grown to three, so only
    // the first two columns take part.
    let snapshot = array![[1.0, -1.0], [0.3, 0.1]];
    let kd = kd_loss(&logits.slice(ndarray::s![.., ..2]), &snapshot.view(), 2.0)?;
    println!("kd (T=2) {:.4}", kd.value);

    let ft = ft_loss(&array![[1.0, 2.0]].view(), &array![[0.0, 0.0]].view())?;
    println!("ft {:.1}", ft.value);

    let kl = kl_divergence(&array![[0.2, 0.1, -0.3]].view(), &logits.slice(ndarray::s![..1, ..]))?;
    println!("kl {:.4}", kl.value);
    Ok(())
}
