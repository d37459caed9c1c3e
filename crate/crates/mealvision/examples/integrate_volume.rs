//! Depth-column volume integration against closed-form solid volumes.

use mealvision::dataset::{render_solid_frontal, Solid};
use mealvision::geometry::{integrate_volume, CameraIntrinsics};

fn main() {
    let camera = CameraIntrinsics {
        fx: 2.0,
        fy: 2.0,
        cx: 0.5,
        cy: 0.5,
    };
    let plane = 0.4;
    let solids = [
        ("hemisphere r=30mm", Solid::Hemisphere { r: 0.030 }),
        (
            "cuboid 40x40x20mm",
            Solid::Cuboid {
                w: 0.040,
                l: 0.040,
                h: 0.020,
            },
        ),
        ("cylinder r=25 h=30mm", Solid::Cylinder { r: 0.025, h: 0.030 }),
        (
            "half-ellipsoid 35/30/22mm",
            Solid::HalfEllipsoid {
                a: 0.035,
                b: 0.030,
                c: 0.022,
            },
        ),
    ];
    println!("{:28} {:>10} {:>10} {:>8}", "solid", "analytic", "integrated", "error");
    for (name, solid) in solids {
        let (depth, mask) = render_solid_frontal(solid, plane, &camera, 256);
        let integrated = integrate_volume(&depth, &mask, plane, &camera).unwrap();
        let analytic = solid.volume_ml();
        println!(
            "{:28} {:>8.2}mL {:>8.2}mL {:>+7.2}%",
            name,
            analytic,
            integrated,
            (integrated / analytic - 1.0) * 100.0
        );
    }
}
