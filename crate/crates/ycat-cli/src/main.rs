fn main() { println!("ycat"); }
