#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace statewise {

// Minimal CSV emitter: one comment line carrying the spec fingerprint and the
// seed, one header row, then data rows. Numbers are written round-trip exact.
class CsvWriter {
  public:
    CsvWriter(const std::string& path, const std::string& fingerprint, std::uint64_t seed,
              const std::vector<std::string>& header)
        : out_(path) {
        if (!out_) throw std::runtime_error("csv: cannot open " + path + " for writing");
        out_ << "# fingerprint=" << fingerprint << " seed=" << seed << "\n";
        write_row(header);
    }

    class Row {
      public:
        explicit Row(CsvWriter& w) : w_(w) {}
        Row& operator<<(const std::string& s) {
            push(s);
            return *this;
        }
        Row& operator<<(const char* s) { return (*this) << std::string(s); }
        Row& operator<<(double v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            push(os.str());
            return *this;
        }
        Row& operator<<(int v) { return (*this) << static_cast<std::int64_t>(v); }
        Row& operator<<(std::int64_t v) {
            push(std::to_string(v));
            return *this;
        }
        ~Row() { w_.out_ << line_ << "\n"; }

      private:
        void push(const std::string& cell) {
            if (!first_) line_ += ',';
            line_ += cell;
            first_ = false;
        }
        CsvWriter& w_;
        std::string line_;
        bool first_ = true;
    };

    Row row() { return Row(*this); }

  private:
    void write_row(const std::vector<std::string>& cells) {
        for (size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << "\n";
    }

    std::ofstream out_;
};

}  // namespace statewise
