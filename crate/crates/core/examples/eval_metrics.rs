//! Frame accuracy, F-beta and temporal F1 for a predicted summary against
//! two gold annotators.

use qvsum::eval::{f_beta, frame_accuracy, generate_summary, summary_budget, temporal_f1, temporal_f1_multi, MultiGold};

fn main() -> qvsum::Result<()> {
    let predicted = [0u8, 3, 3, 2, 0, 1, 2, 3, 0, 0, 1, 3];
    let gold_a = [0u8, 3, 2, 2, 0, 0, 2, 3, 1, 0, 1, 2];
    let gold_b = [1u8, 2, 3, 3, 0, 0, 0, 3, 0, 0, 0, 3];
    let n = predicted.len();
    println!("frame accuracy vs annotator A: {:.4}", frame_accuracy(&predicted, &gold_a)?);

    let k = summary_budget(n, 0.5);
    let sel = generate_summary("v", &predicted, n, k)?;
    let ga = generate_summary("v", &gold_a, n, k)?;
    let gb = generate_summary("v", &gold_b, n, k)?;
    println!("budget {k}: predicted {:?}, A {:?}, B {:?}", sel.selected_frames, ga.selected_frames, gb.selected_frames);

    let single = temporal_f1(&sel, &ga)?;
    println!("vs A: precision {:.3} recall {:.3} F1 {:.3}", single.precision, single.recall, single.f1);
    for agg in [MultiGold::Max, MultiGold::Mean] {
        let m = temporal_f1_multi(&sel, &[ga.clone(), gb.clone()], agg)?;
        println!("{agg:?} over annotators: F1 {:.3}", m.f1);
    }
    let other = temporal_f1(&sel, &gb)?;
    let pairs = [(single.precision, single.recall), (other.precision, other.recall)];
    println!("F1 from averaged (p, r) pairs: {:.4}", f_beta(&pairs, 1.0)?);
    Ok(())
}
