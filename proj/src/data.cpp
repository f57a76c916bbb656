#include "tandem/data.hpp"

#include <array>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace tandem {

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(kBosToken);
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string s;
  s.reserve(ids.size());
  for (int t : ids)
    if (t >= 0 && t < 256) s.push_back(static_cast<char>(t));
  return s;
}

std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) docs.emplace_back(line);
    start = end + 1;
  }
  return docs;
}

std::vector<std::string> read_documents(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return split_documents(ss.str());
}

void write_documents(const std::filesystem::path& path, const std::vector<std::string>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& d : docs) out << d << '\n';
}

std::vector<int> pack_documents(const std::vector<std::string>& docs) {
  std::vector<int> stream;
  for (const auto& d : docs) {
    auto ids = tokenize(d);
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  return stream;
}

namespace {

constexpr std::array kNames{"alice", "bob",   "carol", "dave",  "erin",  "frank", "grace", "heidi",
                            "ivan",  "judy",  "mallory", "nina", "oscar", "peggy", "rupert", "sybil",
                            "trent", "ursula", "victor", "wendy", "xena", "yusuf", "zoe",  "boris"};
constexpr std::array kCities{"paris", "lima", "oslo", "cairo", "delhi", "tokyo", "quito", "rome",
                             "dakar", "hanoi", "perth", "sofia"};
constexpr std::array kColors{"red", "blue", "green", "yellow", "black", "white", "purple", "orange"};
constexpr std::array kAnimals{"cat", "dog", "horse", "parrot", "rabbit", "turtle", "goat", "fox"};
constexpr std::array kNumbers{"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"};

template <typename A>
const char* pick(const A& arr, std::mt19937_64& g) {
  return arr[std::uniform_int_distribution<std::size_t>(0, arr.size() - 1)(g)];
}

struct Person {
  const char* name;
  const char* city;
  const char* color;
  const char* animal;
};

std::string make_document(std::mt19937_64& g) {
  std::vector<Person> people;
  while (people.size() < 2) {
    const char* name = pick(kNames, g);
    if (!people.empty() && std::string_view(people[0].name) == name) continue;
    people.push_back({name, pick(kCities, g), pick(kColors, g), pick(kAnimals, g)});
  }
  std::string doc;
  auto say = [&](const std::string& s) {
    if (!doc.empty()) doc += ' ';
    doc += s;
  };
  // Facts are short so that most questions land within a few dozen bytes of them.
  for (const auto& p : people) say(std::string(p.name) + ": " + p.city + ", " + p.color + " " + p.animal + ".");
  std::uniform_int_distribution<int> kind(0, 3);
  const int n_tail = std::uniform_int_distribution<int>(2, 4)(g);
  for (int s = 0; s < n_tail; ++s) {
    const auto& p = people[std::uniform_int_distribution<std::size_t>(0, 1)(g)];
    switch (kind(g)) {
      case 0:
        say(std::string(p.name) + " lives in " + p.city + ".");
        break;
      case 1:
        say(std::string(p.name) + " has a " + p.color + " " + p.animal + ".");
        break;
      case 2:
        say(std::string("where is ") + p.name + "? " + p.city + ".");
        break;
      default: {
        const int a = std::uniform_int_distribution<int>(0, 5)(g);
        std::string run = "count:";
        for (int k = a; k < a + 4; ++k) run += std::string(" ") + kNumbers[k];
        say(run + ".");
      }
    }
  }
  return doc;
}

}  // namespace

std::vector<std::string> synthetic_documents(std::size_t min_bytes, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::vector<std::string> docs;
  std::size_t total = 0;
  while (total < min_bytes) {
    docs.push_back(make_document(g));
    total += docs.back().size() + 1;
  }
  return docs;
}

std::vector<int> TokenDataset::sample_windows(int batch, int len, std::uint64_t seed, std::int64_t step) const {
  if (len < 1 || static_cast<std::size_t>(len) > stream_.size()) {
    throw std::invalid_argument("dataset: stream shorter than one window");
  }
  CounterRng rng = CounterRng(seed).split(static_cast<std::uint64_t>(step));
  const std::uint64_t starts = stream_.size() - static_cast<std::size_t>(len) + 1;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch) * len);
  for (int b = 0; b < batch; ++b) {
    const auto s = static_cast<std::size_t>(rng.below(starts));
    out.insert(out.end(), stream_.begin() + s, stream_.begin() + s + len);
  }
  return out;
}

std::vector<int> TokenDataset::sequential_windows(int len, int max_windows) const {
  std::vector<int> out;
  for (int w = 0; w < max_windows; ++w) {
    const std::size_t s = static_cast<std::size_t>(w) * len;
    if (s + len > stream_.size()) break;
    out.insert(out.end(), stream_.begin() + s, stream_.begin() + s + len);
  }
  if (out.empty()) throw std::invalid_argument("dataset: empty corpus");
  return out;
}

}  // namespace tandem
