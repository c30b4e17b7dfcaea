//! Translations, dilations and the homogeneous norm on the Kolmogorov group
//! and on a three-level chain in six dimensions.

use kfp::{GroupPoint, OperatorStructure, StructureSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kol = OperatorStructure::kolmogorov();
    println!("Kolmogorov: N = {}, Q = {}, alpha = {:?}", kol.dim(), kol.q(), kol.alpha());

    let a = GroupPoint::new(&[1.0, 0.0], 0.0);
    let b = GroupPoint::new(&[0.0, 0.0], 1.0);
    let ab = kol.compose(&a, &b);
    println!("a o b = ({:?}, {})", ab.x.as_slice(), ab.t);
    let back = kol.compose(&ab, &kol.invert(&b));
    println!("(a o b) o b^-1 - a = {:.1e}", back.max_abs_diff(&a));

    for lam in [0.5, 2.0, 4.0] {
        let d = kol.dilate(lam, &ab)?;
        println!("lambda {lam}: ||D(a o b)|| / ||a o b|| = {:.12}", kol.hom_norm(&d) / kol.hom_norm(&ab));
    }

    let spec: StructureSpec = serde_json::from_str(
        r#"{"N":6,"blocks":[2,2,2],"B":[[0,0,1,0,0,0],[0,0,0,1,0,0],[0,0,0,0,1,0],
            [0,0,0,0,0,1],[0,0,0,0,0,0],[0,0,0,0,0,0]],"lambda":4}"#,
    )?;
    let chain = spec.build()?;
    println!("chain: Q = {}, alpha = {:?}", chain.q(), chain.alpha());
    let z = GroupPoint::new(&[1.0, -1.0, 0.5, 0.25, 0.1, -0.1], 0.3);
    println!("||z|| = {:.6}, cube norm = {:.6}", chain.hom_norm(&z), chain.cube_norm(&z));
    println!("norm equivalence constant ~ {:.3}", chain.estimate_equivalence_constant(2000, 7));
    Ok(())
}
