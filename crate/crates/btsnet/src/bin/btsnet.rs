fn main() {
    println!("btsnet");
}
