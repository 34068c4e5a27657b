// SPDX-License-Identifier: Apache-2.0
//
// Shared numeric types, error type and the task / granularity enums used
// across every module.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace msp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vector = Eigen::VectorXd;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Granularity { Token, Phrase, Sentence };

std::string_view to_string(Granularity g);
Granularity parse_granularity(std::string_view s);

// The seven pre-training objectives.
enum class Task { MLM, MRFR, MOC, IFRS, TITP, TITS, ITM_HS };

inline constexpr std::array<Task, 7> kAllTasks = {Task::MLM,  Task::MRFR, Task::MOC,   Task::IFRS,
                                                  Task::TITP, Task::TITS, Task::ITM_HS};

std::string_view to_string(Task t);
Task parse_task(std::string_view s);

// Tasks whose targets come from the paired image; they are skipped for
// examples whose image was replaced by a negative.
bool is_image_grounded(Task t);

// Ordered small set of tasks (bit mask over kAllTasks).
class TaskSet {
public:
    TaskSet() = default;
    TaskSet(std::initializer_list<Task> tasks) {
        for (Task t : tasks) insert(t);
    }
    void insert(Task t) { bits_ |= bit(t); }
    void erase(Task t) { bits_ &= ~bit(t); }
    bool contains(Task t) const { return (bits_ & bit(t)) != 0; }
    bool empty() const { return bits_ == 0; }
    std::size_t size() const { return static_cast<std::size_t>(__builtin_popcount(bits_)); }
    std::vector<Task> tasks() const {
        std::vector<Task> out;
        for (Task t : kAllTasks)
            if (contains(t)) out.push_back(t);
        return out;
    }
    std::string str() const;
    static TaskSet parse(std::string_view space_separated);
    bool operator==(const TaskSet&) const = default;

private:
    static unsigned bit(Task t) { return 1u << static_cast<unsigned>(t); }
    unsigned bits_ = 0;
};

} // namespace msp
