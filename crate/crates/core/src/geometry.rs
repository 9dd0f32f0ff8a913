//! Small vector helpers for points on the cubic torus.

pub type Point = [f64; 3];

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

/// Wraps a coordinate into `[-side/2, side/2]`.
#[inline]
pub fn wrap_coord(x: f64, side: f64) -> f64 {
    x - side * (x / side).round()
}

/// Minimum-image representative of a displacement.
#[inline]
pub fn min_image(d: Point, side: f64) -> Point {
    [
        wrap_coord(d[0], side),
        wrap_coord(d[1], side),
        wrap_coord(d[2], side),
    ]
}

/// Minimum-image distance between two points on the torus of side `side`.
#[inline]
pub fn torus_distance(a: Point, b: Point, side: f64) -> f64 {
    norm(min_image(sub(a, b), side))
}

/// Maps a point into the fundamental cell `[0, side)³`.
#[inline]
pub fn into_cell(p: Point, side: f64) -> Point {
    let f = |x: f64| {
        let y = x.rem_euclid(side);
        if y >= side {
            0.0
        } else {
            y
        }
    };
    [f(p[0]), f(p[1]), f(p[2])]
}

/// Radius of a ball of the given volume ("mass").
#[inline]
pub fn ball_radius(mass: f64) -> f64 {
    (3.0 * mass / (4.0 * std::f64::consts::PI)).cbrt()
}

/// Volume of a ball of the given radius.
#[inline]
pub fn ball_volume(radius: f64) -> f64 {
    4.0 * std::f64::consts::PI * radius.powi(3) / 3.0
}
