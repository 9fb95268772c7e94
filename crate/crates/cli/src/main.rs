fn main() {
    println!("mapfuse");
}
