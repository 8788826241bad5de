fn main() {
    println!("veil: cli wiring pending");
}
