// Keep only the top-k teacher logits and rebuild the teacher distribution
// from them.

use softlabel::logits::{
    dequantize, kl_div, quantized_probs, softmax_t, topk_quantize, LogitVector,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let z = LogitVector::new(vec![3.1, -0.4, 1.7, 0.2, 2.6, -1.3, 0.9, -2.0])?;
    let tau = 2.0;
    let dense = softmax_t(&z, tau)?;
    println!("dense teacher at tau {tau}: {:.4?}", dense.probs());

    for k in [1, 2, 4, 8] {
        let q = topk_quantize(&z, k)?;
        let sparse = quantized_probs(&q, tau)?;
        let dropped: f64 = (0..z.num_classes())
            .filter(|i| !q.indices().contains(&(*i as u32)))
            .map(|i| dense.probs()[i])
            .sum();
        println!(
            "k = {k}: classes {:?}, KL(sparse || dense) = {:.5}, dense mass dropped = {:.4}",
            q.indices(),
            kl_div(&sparse, &dense)?,
            dropped
        );
    }

    // Zero-filling the dropped classes is only a layout; its softmax gives the
    // dropped classes e^0 each and is not the stored teacher.
    let q = topk_quantize(&z, 2)?;
    let filled = softmax_t(&dequantize(&q), tau)?;
    let masked = quantized_probs(&q, tau)?;
    println!("masked top-2: {:.4?}", masked.to_dense_vec());
    println!("zero-filled:  {:.4?}", filled.probs());
    assert!(masked.to_dense_vec()[1] == 0.0 && filled.probs()[1] > 0.0);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
