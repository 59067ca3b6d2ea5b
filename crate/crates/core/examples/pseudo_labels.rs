//! Turns per-frame relevance scores into 2-second segment pseudo labels.

use qvsum::labels::{gen_segment_pseudo_labels, segment_to_class};

fn main() -> qvsum::Result<()> {
    let scores = [3u8, 3, 2, 3, 0, 0, 1, 0, 2, 2, 1];
    for fps in [1, 2] {
        println!("fps {fps}:");
        for seg in gen_segment_pseudo_labels(&scores, fps)? {
            println!("  segment {}  frames {:?}  mean {:.2}  class {}", seg.segment_index, seg.frames(), seg.mean, segment_to_class(seg.mean)?);
        }
    }
    Ok(())
}
