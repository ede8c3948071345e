//! Render each shape family, print one positive as ASCII art and write a
//! small labeled dataset (PGM images plus masks) to a directory.
//!
//! cargo run --example gen_data -- [out_dir]

use transplant::data::{export_dataset, generate_dataset, Family, SynthCategory};

fn ascii(image: &transplant::Tensor) -> String {
    let (h, w, _) = image.hwc().unwrap();
    let ramp = [' ', '.', ':', 'o', '#'];
    let mut s = String::new();
    for y in 0..h {
        for x in 0..w {
            let v = image.data()[y * w + x].clamp(0.0, 0.999);
            s.push(ramp[(v * ramp.len() as f32) as usize]);
        }
        s.push('\n');
    }
    s
}

fn main() -> transplant::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "gen_data_out".into());
    for family in Family::all() {
        let cat = SynthCategory::new(family.name(), family);
        let samples = generate_dataset(&cat, 20, 1)?;
        println!("{} (label {}):\n{}", family.name(), samples[0].label, ascii(&samples[0].image));
        export_dataset(&samples, &std::path::Path::new(&out).join(family.name()))?;
    }
    println!("wrote 20 samples per family under {out}/");
    Ok(())
}
